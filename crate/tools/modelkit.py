#!/usr/bin/env python3
"""Builds the toy fixtures consumed by the agf engine.

Subcommands:
  dataset   write a synthetic shapes or two-object dataset directory
  train     train the toy classifier and save a torch state dict
  export    write a ModelPack (full model, or the feature/head split) plus reference logits
  gallery   write a JSON-lines latent gallery from the feature extractor
  all       run everything into a fixtures directory

Every subcommand takes --seed; identical seeds give identical bytes.
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

CLASSES = ("circle", "square", "triangle", "cross")
SIZE = 32
MEAN = [0.5, 0.5, 0.5]
STD = [0.25, 0.25, 0.25]


# ---------------------------------------------------------------- shapes


def shape_mask(kind, cy, cx, r):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return dy * dy + dx * dx <= r * r
    if kind == 1:
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == 2:
        top, base = cy - r, cy + r * 0.8
        inside = (yy >= top) & (yy <= base)
        half = (yy - top) / (base - top + 1e-9) * r
        return inside & (np.abs(dx) <= half)
    arm = max(1.0, r * 0.3)
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))


def background(rng):
    base = rng.uniform(0.1, 0.9, size=3)
    img = base[None, None, :] + rng.normal(0.0, 0.08, size=(SIZE, SIZE, 3))
    return img, base


def shape_color(rng, base):
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if abs(c.mean() - base.mean()) > 0.3:
            return c


def paint(img, mask, color, rng):
    noisy = color[None, None, :] + rng.normal(0.0, 0.05, size=img.shape)
    img[mask] = noisy[mask]


def single_shape(rng, kind):
    img, base = background(rng)
    r = rng.uniform(5.0, 10.0) * SIZE / 32
    cy, cx = rng.uniform(r + 1, SIZE - r - 1, size=2)
    m = shape_mask(kind, cy, cx, r)
    paint(img, m, shape_color(rng, base), rng)
    return np.clip(img, 0.0, 1.0), m


def two_shapes(rng, a, b):
    """Class `a` and class `b` in opposite halves, masks disjoint."""
    img, base = background(rng)
    masks = {}
    left_first = rng.random() < 0.5
    for kind, left in ((a, left_first), (b, not left_first)):
        r = rng.uniform(5.0, 7.0) * SIZE / 32
        cy = rng.uniform(r + 1, SIZE - r - 1)
        lo = 0 if left else SIZE // 2
        cx = rng.uniform(lo + r + 0.5, lo + SIZE // 2 - r - 0.5)
        m = shape_mask(kind, cy, cx, r)
        paint(img, m, shape_color(rng, base), rng)
        masks[kind] = m
    return np.clip(img, 0.0, 1.0), masks


PAIRS = [(a, b) for a in range(4) for b in range(4) if a < b]


def to_u8(img):
    return np.round(img * 255.0).astype(np.uint8)


def write_ppm(path, img):
    h, w, _ = img.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + to_u8(img).tobytes())


def write_pgm(path, mask):
    h, w = mask.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + (mask.astype(np.uint8) * 255).tobytes())


def build_shapes(out, n, seed):
    rng = np.random.default_rng(seed)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rows = ["filename,label"]
    for i in range(n):
        kind = i % len(CLASSES)
        img, m = single_shape(rng, kind)
        name = f"s{i:03d}.ppm"
        write_ppm(out / "images" / name, img)
        write_pgm(out / "masks" / f"s{i:03d}.pgm", m)
        rows.append(f"{name},{kind}")
    (out / "labels.csv").write_text("\n".join(rows) + "\n")


def build_two_object(out, n, seed):
    rng = np.random.default_rng(seed)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rows = ["filename,label"]
    for i in range(n):
        a, b = PAIRS[i % len(PAIRS)]
        img, masks = two_shapes(rng, a, b)
        assert not (masks[a] & masks[b]).any()
        name = f"t{i:03d}.ppm"
        write_ppm(out / "images" / name, img)
        for kind, m in masks.items():
            write_pgm(out / "masks" / f"t{i:03d}_{kind}.pgm", m)
        rows += [f"{name},{a}", f"{name},{b}"]
    (out / "labels.csv").write_text("\n".join(rows) + "\n")


def load_ppm(path):
    data = path.read_bytes()
    parts = data.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------- model


WIDTH = 16
HIDDEN = 0


def toy_cnn():
    w = WIDTH
    flat = 2 * w * (SIZE // 4) ** 2
    head = [nn.Linear(flat, HIDDEN), nn.ReLU(), nn.Linear(HIDDEN, len(CLASSES))] if HIDDEN else [nn.Linear(flat, len(CLASSES))]
    return nn.Sequential(
        nn.Conv2d(3, w, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(w, 2 * w, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        *head,
    )


def check_sequential(model):
    allowed = (nn.Conv2d, nn.Linear, nn.ReLU, nn.MaxPool2d, nn.AvgPool2d, nn.Flatten)
    if not isinstance(model, nn.Sequential):
        raise ValueError("only nn.Sequential chains are supported")
    for m in model:
        if not isinstance(m, allowed):
            raise ValueError(f"unsupported layer {type(m).__name__}")


def normalize(batch_hwc_u8):
    x = torch.from_numpy(batch_hwc_u8.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    mean = torch.tensor(MEAN, dtype=torch.float32)[None, :, None, None]
    std = torch.tensor(STD, dtype=torch.float32)[None, :, None, None]
    return (x - mean) / std


def training_set(rng, singles, pairs):
    imgs, targets = [], []
    for i in range(singles):
        kind = i % len(CLASSES)
        img, _ = single_shape(rng, kind)
        imgs.append(to_u8(img))
        t = np.zeros(len(CLASSES), dtype=np.float32)
        t[kind] = 1.0
        targets.append(t)
    for i in range(pairs):
        a, b = PAIRS[i % len(PAIRS)]
        img, _ = two_shapes(rng, a, b)
        imgs.append(to_u8(img))
        t = np.zeros(len(CLASSES), dtype=np.float32)
        t[[a, b]] = 0.5
        targets.append(t)
    return np.stack(imgs), np.stack(targets)


def train(seed, epochs=12):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    x, y = training_set(rng, 6000, 2400)
    xv, yv = training_set(rng, 1000, 0)
    x, y, xv = normalize(x), torch.from_numpy(y), normalize(xv)
    model = toy_cnn()
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss = torch.sum(-y[idx] * torch.log_softmax(model(x[idx]), dim=1), dim=1).mean()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = (model(xv).argmax(1) == torch.from_numpy(yv.argmax(1))).float().mean().item()
    return model, acc


# ---------------------------------------------------------------- ModelPack


def modelpack_bytes(layers, class_count, input_shape, mean, std):
    buffers = bytearray()
    specs = []

    def push(t):
        arr = t.detach().cpu().numpy().astype("<f4")
        off = len(buffers)
        buffers.extend(arr.tobytes())
        return {"shape": list(arr.shape), "offset": off, "length": len(buffers) - off}

    for m in layers:
        if isinstance(m, nn.Conv2d):
            specs.append({
                "kind": "conv2d",
                "stride": m.stride[0],
                "padding": m.padding[0],
                "params": {"weight": push(m.weight), "bias": push(m.bias)},
            })
        elif isinstance(m, nn.Linear):
            specs.append({"kind": "linear", "params": {"weight": push(m.weight), "bias": push(m.bias)}})
        elif isinstance(m, nn.ReLU):
            specs.append({"kind": "relu"})
        elif isinstance(m, (nn.MaxPool2d, nn.AvgPool2d)):
            k = m.kernel_size if isinstance(m.kernel_size, int) else m.kernel_size[0]
            s = m.stride if isinstance(m.stride, int) else m.stride[0]
            p = m.padding if isinstance(m.padding, int) else m.padding[0]
            kind = "maxpool2d" if isinstance(m, nn.MaxPool2d) else "avgpool2d"
            specs.append({"kind": kind, "kernel": k, "stride": s, "padding": p})
        elif isinstance(m, nn.Flatten):
            specs.append({"kind": "flatten"})
        else:
            raise ValueError(f"unsupported layer {type(m).__name__}")
    manifest = {
        "class_count": class_count,
        "input_shape": input_shape,
        "preprocessing": {"mean": mean, "std": std},
        "layers": specs,
    }
    js = json.dumps(manifest, separators=(",", ":")).encode()
    return b"NNPK" + struct.pack("<IQ", 1, len(js)) + js + bytes(buffers)


def export(model, out_dir, shapes_dir, seed):
    check_sequential(model)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = list(model)
    (out_dir / "toy_cnn.npk").write_bytes(
        modelpack_bytes(layers, len(CLASSES), [3, SIZE, SIZE], MEAN, STD)
    )
    split = len(layers) - 1
    feat_dim = layers[split].in_features
    (out_dir / "ssl_features.npk").write_bytes(
        modelpack_bytes(layers[:split], feat_dim, [3, SIZE, SIZE], MEAN, STD)
    )
    (out_dir / "ssl_head.npk").write_bytes(modelpack_bytes(layers[split:], len(CLASSES), [feat_dim], [], []))

    names = sorted(p.name for p in (shapes_dir / "images").iterdir())[:16]
    batch = np.stack([load_ppm(shapes_dir / "images" / n) for n in names])
    with torch.no_grad():
        logits = model(normalize(batch)).numpy().astype(np.float32)
    ref = {
        "seed": seed,
        "images": [{"file": n, "logits": [float(v) for v in row]} for n, row in zip(names, logits)],
    }
    (out_dir / "reference_logits.json").write_text(json.dumps(ref, indent=1) + "\n")


def gallery(model, out_path, n, seed):
    rng = np.random.default_rng(seed)
    layers = list(model)
    features, head = nn.Sequential(*layers[:-1]), layers[-1]
    imgs = np.stack([to_u8(single_shape(rng, i % len(CLASSES))[0]) for i in range(n)])
    with torch.no_grad():
        lat = features(normalize(imgs))
        lg = head(lat)
    lines = []
    for i in range(n):
        lines.append(json.dumps({
            "id": f"g{i:03d}",
            "latent": [float(v) for v in lat[i].numpy().astype(np.float32)],
            "logits": [float(v) for v in lg[i].numpy().astype(np.float32)],
        }, separators=(",", ":")))
    out_path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- CLI


def main():
    global SIZE, WIDTH, HIDDEN
    ap = argparse.ArgumentParser(prog="modelkit")
    sub = ap.add_subparsers(dest="cmd", required=True)
    d = sub.add_parser("dataset")
    d.add_argument("--kind", choices=["shapes", "two-object"], required=True)
    d.add_argument("--n", type=int, default=64)
    d.add_argument("--out", type=Path, required=True)
    t = sub.add_parser("train")
    t.add_argument("--out", type=Path, required=True)
    e = sub.add_parser("export")
    e.add_argument("--weights", type=Path, required=True)
    e.add_argument("--shapes", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    g = sub.add_parser("gallery")
    g.add_argument("--weights", type=Path, required=True)
    g.add_argument("--n", type=int, default=32)
    g.add_argument("--out", type=Path, required=True)
    a = sub.add_parser("all")
    a.add_argument("--out", type=Path, required=True)
    for p in (d, t, e, g, a):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--size", type=int, default=SIZE)
        p.add_argument("--width", type=int, default=WIDTH)
        p.add_argument("--hidden", type=int, default=HIDDEN)
    args = ap.parse_args()
    SIZE, WIDTH, HIDDEN = args.size, args.width, args.hidden

    def load_weights(path):
        m = toy_cnn()
        m.load_state_dict(torch.load(path))
        return m.eval()

    if args.cmd == "dataset":
        build = build_shapes if args.kind == "shapes" else build_two_object
        build(args.out, args.n, args.seed)
    elif args.cmd == "train":
        model, acc = train(args.seed)
        print(f"validation accuracy {acc:.4f}")
        torch.save(model.state_dict(), args.out)
    elif args.cmd == "export":
        export(load_weights(args.weights), args.out, args.shapes, args.seed)
    elif args.cmd == "gallery":
        gallery(load_weights(args.weights), args.out, args.n, args.seed)
    else:
        out = args.out
        build_shapes(out / "data" / "shapes", 64, args.seed + 1)
        build_two_object(out / "data" / "two_object", 64, args.seed + 2)
        model, acc = train(args.seed)
        print(f"validation accuracy {acc:.4f}")
        if acc < 0.95:
            raise SystemExit("classifier below 95% validation accuracy")
        export(model, out / "models", out / "data" / "shapes", args.seed)
        gallery(model, out / "models" / "gallery.jsonl", 32, args.seed + 3)
        manifest = {"seed": args.seed, "validation_accuracy": round(acc, 4)}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


if __name__ == "__main__":
    main()
