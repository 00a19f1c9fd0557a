"""Images, label maps, meta data, and the synthetic scene generator.

Label maps are binary PGM (P5, maxval 255, one class index per byte, 255 =
ignore); RGB images are binary PPM (P6, maxval 255). Meta data is a two-line
text file per image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensorcore import IGNORE, ConfigError


class FormatError(ValueError):
    pass


@dataclass
class MetaRecord:
    attributes: frozenset
    caption: tuple  # word ids


@dataclass
class Sample:
    image: np.ndarray   # H×W×3 floats in [0, 1]
    labels: np.ndarray  # H×W uint8, IGNORE for void
    meta: MetaRecord


@dataclass
class Dataset:
    name: str
    k: int
    class_names: list
    train: list
    val: list
    taxonomy: dict          # class id -> frozenset of attribute ids
    attribute_names: list
    vocabulary: list        # word id -> word
    params: dict = field(default_factory=dict)

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)


# ---------------------------------------------------------------------------
# netpbm


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("truncated or malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header")
    w, h, maxval = fields
    return w, h, maxval, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, maxval, off = _read_header(buf, magic)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    if w < 1 or h < 1 or w > 1 << 16 or h > 1 << 16:
        raise FormatError(f"unsupported dimensions {w}×{h}")
    n = w * h * channels
    if len(buf) - off < n:
        raise FormatError("payload shorter than header promises")
    arr = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def _write_atomic(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def read_label_image(path, k: int | None = None) -> np.ndarray:
    labels = _read_netpbm(path, b"P5", 1)
    if k is not None:
        bad = (labels >= k) & (labels != IGNORE)
        if bad.any():
            raise FormatError(f"label value >= k={k} in {path}")
    return labels


def write_label_image(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min() < 0 or labels.max() > 255:
        raise FormatError("labels must be a 2-D map of bytes")
    h, w = labels.shape
    _write_atomic(path, b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


def read_rgb_image(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).astype(np.float64) / 255.0


def write_rgb_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"RGB image must be H×W×3, got {image.shape}")
    h, w, _ = image.shape
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write_atomic(path, b"P6\n%d %d\n255\n" % (w, h) + q.tobytes())


def write_meta(path, meta: MetaRecord, vocabulary: list) -> None:
    attrs = " ".join(str(a) for a in sorted(meta.attributes))
    words = " ".join(vocabulary[i] for i in meta.caption)
    _write_atomic(path, f"attrs: {attrs}\ncaption: {words}\n".encode())


def read_meta(path, vocabulary: list, n_attributes: int | None = None) -> MetaRecord:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or not lines[0].startswith("attrs:") or not lines[1].startswith("caption:"):
        raise FormatError(f"malformed meta file {path}")
    try:
        attrs = frozenset(int(t) for t in lines[0][len("attrs:"):].split())
    except ValueError as exc:
        raise FormatError(f"bad attribute id in {path}") from exc
    if n_attributes is not None and any(a < 0 or a >= n_attributes for a in attrs):
        raise FormatError(f"attribute id out of range in {path}")
    index = {w: i for i, w in enumerate(vocabulary)}
    try:
        caption = tuple(index[w] for w in lines[1][len("caption:"):].split())
    except KeyError as exc:
        raise FormatError(f"unknown caption word {exc} in {path}") from None
    return MetaRecord(attrs, caption)


# ---------------------------------------------------------------------------
# taxonomy


def derive_attributes(labels_present, taxonomy: dict) -> frozenset:
    """Union of the ancestor attributes of every present class."""
    out: set = set()
    for c in labels_present:
        if c not in taxonomy:
            raise KeyError(f"class {c} missing from taxonomy")
        out |= taxonomy[c]
    return frozenset(out)


SHAPE_KINDS = ("disk", "box", "wedge", "diamond", "ring", "cross", "bar")
FILLER_WORDS = ("a", "the", "with", "and", "of", "scene", "photo", "near", "some")


def build_taxonomy(k: int) -> tuple[dict, list]:
    """Two-level hierarchy: each class -> {its group, its root}.

    Background is 'stuff'; object classes pair up into groups under 'thing'.
    """
    n_groups = 1 + (k - 1 + 1) // 2
    names = ["group-bg"] + [f"group-{g}" for g in range(1, n_groups)] + ["stuff", "thing"]
    stuff, thing = n_groups, n_groups + 1
    taxonomy = {0: frozenset({0, stuff})}
    for c in range(1, k):
        taxonomy[c] = frozenset({1 + (c - 1) // 2, thing})
    return taxonomy, names


def class_names_for(k: int) -> list:
    names = ["background"]
    for c in range(1, k):
        base = SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)]
        rep = (c - 1) // len(SHAPE_KINDS)
        names.append(base if rep == 0 else f"{base}{rep + 1}")
    return names


def confusable(c: int, k: int) -> int:
    """Visually confusable partner of an object class."""
    if (c - 1) % 2 == 0:
        return c + 1 if c + 1 < k else c - 1
    return c - 1


# ---------------------------------------------------------------------------
# synthetic scenes


def _class_palette(k: int, seed: int) -> np.ndarray:
    """Per-class base color; confusable partners get nearby colors."""
    rng = SplitMix64(derive_seed(seed, "palette"))
    pal = np.zeros((k, 3))
    pal[0] = (0.45, 0.45, 0.45)
    for c in range(1, k):
        if (c - 1) % 2 == 1:
            base = pal[c - 1]
            pal[c] = np.clip(base + (rng.uniform_block(3) - 0.5) * 0.12, 0.05, 0.95)
        else:
            pal[c] = 0.1 + 0.8 * rng.uniform_block(3)
    return pal


def _texture(kind: int, yy: np.ndarray, xx: np.ndarray, phase: float) -> np.ndarray:
    period = 4.0 + (kind % 3)
    t = kind % 4
    if t == 0:
        return np.sin(2 * np.pi * (yy + phase) / period)
    if t == 1:
        return np.sin(2 * np.pi * (xx + phase) / period)
    if t == 2:
        return np.sign(np.sin(np.pi * (yy + phase) / period) * np.sin(np.pi * (xx + phase) / period))
    return np.sin(2 * np.pi * (xx + yy + phase) / period)


def _shape_mask(kind: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "box":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "wedge":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == "cross":
        return ((np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r))
    return (np.abs(dy) <= r * 0.4) & (np.abs(dx) <= r)


def _render(rng: SplitMix64, classes: list, k: int, H: int, W: int, palette: np.ndarray,
            distractor_rate: float, names: list) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = palette[0] + 0.06 * _texture(0, yy, xx, rng.uniform(0, 8))[..., None]
    labels = np.zeros((H, W), dtype=np.uint8)
    for c in classes:
        r = rng.uniform(H / 6.0, H / 3.5)
        cy, cx = rng.uniform(r, H - r), rng.uniform(r, W - r)
        look = c
        if distractor_rate > 0 and rng.random() < distractor_rate:
            look = confusable(c, k)
        kind = names[c].rstrip("0123456789")
        mask = _shape_mask(kind, yy, xx, cy, cx, r)
        if not mask.any():
            continue
        tex = _texture(look, yy, xx, rng.uniform(0, 8))
        shade = palette[look] * (1.0 + 0.2 * tex[..., None])
        img = np.where(mask[..., None], shade, img)
        labels[mask] = c
    img = img + 0.04 * rng.normal_block(img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, labels


def _caption(rng: SplitMix64, present: list, k: int) -> tuple:
    filler = {w: k + i for i, w in enumerate(FILLER_WORDS)}
    words = [filler["a"], filler[("scene", "photo")[rng.randbelow(2)]], filler["with"]]
    objs = [c for c in present if c != 0] or [0]
    for n, c in enumerate(objs):
        if n:
            words.append(filler["and"])
        words.append(filler[("the", "some")[rng.randbelow(2)]])
        words.append(c)
    if 0 in present and rng.random() < 0.5:
        words += [filler["near"], filler["the"], 0]
    return tuple(words)


def generate_synthetic(seed: int, n_images: int, k: int, H: int, W: int,
                       distractor_rate: float = 0.0, n_val: int = 0,
                       name: str = "synthetic") -> Dataset:
    """Deterministic toy scenes: 1-3 textured shapes on a background class.

    Shapes are drawn so every object class appears as the first shape in a
    round-robin quota. With probability ``distractor_rate`` a shape borrows
    the color and texture of its confusable partner class while keeping its
    true label.
    """
    if k < 3:
        raise ConfigError(f"k must be >= 3, got {k}")
    if H < 32 or W < 32:
        raise ConfigError(f"images must be at least 32×32, got {H}×{W}")
    if n_images < 1 or n_val < 0:
        raise ConfigError("need at least one training image")
    if not 0.0 <= distractor_rate <= 1.0:
        raise ConfigError(f"distractor_rate must lie in [0, 1], got {distractor_rate}")
    if k > 255:
        raise ConfigError("k must be below the ignore sentinel 255")
    names = class_names_for(k)
    taxonomy, attr_names = build_taxonomy(k)
    vocabulary = names + list(FILLER_WORDS)
    palette = _class_palette(k, seed)

    def make_split(label: str, n: int, offset: int) -> list:
        out = []
        for i in range(n):
            rng = SplitMix64(derive_seed(seed, f"{label}/{i}"))
            first = 1 + (i + offset) % (k - 1)
            n_shapes = 1 + rng.randbelow(3)
            classes = [first] + [1 + rng.randbelow(k - 1) for _ in range(n_shapes - 1)]
            img, labels = _render(rng, classes, k, H, W, palette, distractor_rate, names)
            present = sorted(int(c) for c in np.unique(labels))
            meta = MetaRecord(derive_attributes(present, taxonomy), _caption(rng, present, k))
            out.append(Sample(img, labels, meta))
        return out

    return Dataset(
        name=name, k=k, class_names=names,
        train=make_split("train", n_images, 0), val=make_split("val", n_val, 0),
        taxonomy=taxonomy, attribute_names=attr_names, vocabulary=vocabulary,
        params={"seed": seed, "height": H, "width": W, "distractor_rate": distractor_rate},
    )


# ---------------------------------------------------------------------------
# dataset directories


def write_manifest(path, ds: Dataset) -> None:
    lines = [f"name {ds.name}", f"k {ds.k}"]
    lines += [f"param {key} {val!r}" for key, val in sorted(ds.params.items())]
    lines += [f"classname {c} {n}" for c, n in enumerate(ds.class_names)]
    lines += [f"attribute {a} {n}" for a, n in enumerate(ds.attribute_names)]
    for c in range(ds.k):
        lines += [f"class {c} ancestor {a}" for a in sorted(ds.taxonomy[c])]
    lines += [f"word {i} {w}" for i, w in enumerate(ds.vocabulary)]
    lines += [f"split train {len(ds.train)}", f"split val {len(ds.val)}"]
    _write_atomic(path, ("\n".join(lines) + "\n").encode())


def save_dataset(root, ds: Dataset) -> None:
    root = Path(root)
    for split, samples in (("train", ds.train), ("val", ds.val)):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            write_rgb_image(d / f"img_{i:05d}.ppm", s.image)
            write_label_image(d / f"lbl_{i:05d}.pgm", s.labels)
            write_meta(d / f"meta_{i:05d}.txt", s.meta, ds.vocabulary)
    write_manifest(root / "manifest.txt", ds)


def _parse_param(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text.strip("'\"")


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.txt"
    if not mpath.exists():
        raise FormatError(f"no manifest.txt under {root}")
    name, k, params = root.name, None, {}
    names, attrs, vocab, counts = {}, {}, {}, {}
    edges: dict = {}
    for raw in mpath.read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        try:
            tag = parts[0]
            if tag == "name":
                name = parts[1]
            elif tag == "k":
                k = int(parts[1])
            elif tag == "param":
                params[parts[1]] = _parse_param(parts[2])
            elif tag == "classname":
                names[int(parts[1])] = parts[2]
            elif tag == "attribute":
                attrs[int(parts[1])] = parts[2]
            elif tag == "class" and parts[2] == "ancestor":
                edges.setdefault(int(parts[1]), set()).add(int(parts[3]))
            elif tag == "word":
                vocab[int(parts[1])] = parts[2]
            elif tag == "split":
                counts[parts[1]] = int(parts[2])
            else:
                raise FormatError(f"unknown manifest line: {raw!r}")
        except (IndexError, ValueError) as exc:
            raise FormatError(f"malformed manifest line: {raw!r}") from exc
    if k is None or sorted(names) != list(range(k)):
        raise FormatError("manifest must list k and one name per class")
    if sorted(edges) != list(range(k)):
        raise FormatError("taxonomy must cover every class")
    vocabulary = [vocab[i] for i in range(len(vocab))]
    attribute_names = [attrs[i] for i in range(len(attrs))]
    splits = {}
    for split in ("train", "val"):
        samples = []
        for i in range(counts.get(split, 0)):
            d = root / split
            img = read_rgb_image(d / f"img_{i:05d}.ppm")
            lbl = read_label_image(d / f"lbl_{i:05d}.pgm", k)
            if img.shape[:2] != lbl.shape:
                raise FormatError(f"image/label size mismatch for {split} {i}")
            meta = read_meta(d / f"meta_{i:05d}.txt", vocabulary, len(attribute_names))
            samples.append(Sample(img, lbl, meta))
        splits[split] = samples
    return Dataset(name=name, k=k, class_names=[names[c] for c in range(k)],
                   train=splits["train"], val=splits["val"],
                   taxonomy={c: frozenset(a) for c, a in edges.items()},
                   attribute_names=attribute_names, vocabulary=vocabulary, params=params)
