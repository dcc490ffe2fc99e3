"""Procedural face images, rectangular occlusion, subject-level splits, and
PGM/PPM file IO."""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ConfigError, ContractError, FormatError


@dataclass(frozen=True)
class MaskSpec:
    top: int
    left: int
    height: int
    width: int
    fill_value: float = 0.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise BoundsError(f"mask must be at least 1x1, got {self.height}x{self.width}")
        if not 0.0 <= self.fill_value <= 1.0:
            raise BoundsError(f"mask fill value {self.fill_value} outside [0, 1]")

    def check_inside(self, height, width):
        if self.top < 0 or self.left < 0 or self.top + self.height > height or self.left + self.width > width:
            raise BoundsError(
                f"mask rows {self.top}:{self.top + self.height}, cols {self.left}:{self.left + self.width} "
                f"fall outside a {height}x{width} image"
            )

    def region(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def to_list(self):
        return [self.top, self.left, self.height, self.width]


def apply_mask(image, mask):
    """Copy of ``image`` (H, W) or (C, H, W) with the rectangle set to the fill value."""
    image = np.asarray(image)
    mask.check_inside(*image.shape[-2:])
    out = image.copy()
    rows, cols = mask.region()
    out[..., rows, cols] = mask.fill_value
    return out


def random_mask(rng, image_hw, mask_hw=(16, 16), fill_value=0.0):
    """Mask placed uniformly over all positions that keep it inside the image."""
    h, w = image_hw
    mh, mw = mask_hw
    if mh > h or mw > w or mh < 1 or mw < 1:
        raise BoundsError(f"mask {mh}x{mw} does not fit a {h}x{w} image")
    top = int(rng.integers(0, h - mh + 1))
    left = int(rng.integers(0, w - mw + 1))
    return MaskSpec(top, left, mh, mw, fill_value)


# procedural faces


def _soft(signed_distance, sharpness=2.0):
    # ~1 inside (negative distance), ~0 outside, one-pixel transition
    return 1.0 / (1.0 + np.exp(np.clip(sharpness * signed_distance, -30, 30)))


def _subject_params(rng, channels):
    return {
        "bg": rng.uniform(0.08, 0.22),
        "skin": rng.uniform(0.55, 0.8),
        "tint": rng.uniform(0.85, 1.1, size=channels) if channels > 1 else np.ones(1),
        "head_rx": rng.uniform(0.30, 0.38),
        "head_ry": rng.uniform(0.38, 0.45),
        "eye_y": rng.uniform(0.36, 0.44),
        "eye_dx": rng.uniform(0.14, 0.21),
        "eye_r": rng.uniform(0.05, 0.08),
        "eye_dark": rng.uniform(0.1, 0.3),
        "mouth_y": rng.uniform(0.68, 0.76),
        "mouth_w": rng.uniform(0.10, 0.20),
        "mouth_t": rng.uniform(0.03, 0.05),
        "mouth_dark": rng.uniform(0.2, 0.4),
        "light_angle": rng.uniform(0, 2 * np.pi),
        "light_strength": rng.uniform(0.1, 0.35),
    }


def _render_face(p, jitter, size):
    channels, h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys = (yy + 0.5) / h - 0.5 - jitter["dy"]
    xs = (xx + 0.5) / w - 0.5 - jitter["dx"]
    px = 1.0 / min(h, w)

    head_d = (np.sqrt((xs / p["head_rx"]) ** 2 + (ys / p["head_ry"]) ** 2) - 1.0) * p["head_rx"]
    head = _soft(head_d / px)
    face = p["bg"] + (p["skin"] + jitter["brightness"] - p["bg"]) * head

    eye_y = p["eye_y"] - 0.5
    for side in (-1.0, 1.0):
        d = np.sqrt((xs - side * p["eye_dx"]) ** 2 + (ys - eye_y) ** 2) - p["eye_r"]
        face = face * (1.0 - (1.0 - p["eye_dark"]) * _soft(d / px))

    mouth_y = p["mouth_y"] - 0.5
    d = np.maximum(np.abs(xs) - p["mouth_w"], np.abs(ys - mouth_y) - p["mouth_t"])
    face = face * (1.0 - (1.0 - p["mouth_dark"]) * _soft(d / px))

    angle = p["light_angle"] + jitter["angle"]
    light = 1.0 + p["light_strength"] * (xs * np.cos(angle) + ys * np.sin(angle))
    face = face * light
    img = face[None, :, :] * p["tint"].reshape(-1, 1, 1)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_procedural_faces(count, seed, size=(1, 32, 32), samples_per_subject=8):
    """Deterministic face-like images, ``samples_per_subject`` per subject id.

    Each subject has its own head shape, eye and mouth layout, skin tone and
    lighting direction; samples of one subject differ by a sub-pixel shift,
    a small brightness offset and a small change of lighting angle.
    """
    if count < 1:
        raise ContractError(f"count must be at least 1, got {count}")
    size = tuple(size)
    out = []
    n_subjects = math.ceil(count / samples_per_subject)
    for subject in range(n_subjects):
        params = _subject_params(np.random.default_rng([seed, subject]), size[0])
        for sample in range(samples_per_subject):
            if len(out) == count:
                break
            rng = np.random.default_rng([seed, subject, sample + 1])
            jitter = {
                "dy": rng.uniform(-0.03, 0.03),
                "dx": rng.uniform(-0.03, 0.03),
                "brightness": rng.uniform(-0.04, 0.04),
                "angle": rng.uniform(-0.3, 0.3),
            }
            out.append((subject, _render_face(params, jitter, size)))
    return out


# datasets


@dataclass
class Dataset:
    """Aligned arrays: ``full`` and ``occluded`` are (N, C, H, W) float32."""

    subject_ids: np.ndarray
    full: np.ndarray
    occluded: np.ndarray
    masks: list
    split: str = "all"

    def __len__(self):
        return len(self.subject_ids)

    @property
    def items(self):
        return list(zip(self.subject_ids.tolist(), self.full, self.occluded, self.masks))

    def subset(self, index, split=None):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.subject_ids[index],
            self.full[index],
            self.occluded[index],
            [self.masks[i] for i in index],
            split or self.split,
        )


def build_dataset(faces, seed, mask_hw=(16, 16), fill_value=0.0):
    """Occlude every face with one randomly placed rectangle."""
    if not faces:
        raise ContractError("no images given")
    ids = np.array([sid for sid, _ in faces], dtype=np.int64)
    full = np.stack([img for _, img in faces]).astype(np.float32)
    masks, occluded = [], []
    for i, img in enumerate(full):
        m = random_mask(np.random.default_rng([seed, 7919, i]), img.shape[-2:], mask_hw, fill_value)
        masks.append(m)
        occluded.append(apply_mask(img, m))
    return Dataset(ids, full, np.stack(occluded), masks)


def _split_counts(n, ratios):
    counts = [int(round(r * n)) for r in ratios]
    counts[-1] = n - sum(counts[:-1])
    for i in range(len(counts)):
        while counts[i] < 1:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(dataset, ratios=(0.6, 0.2, 0.2), seed=0):
    """Partition by subject id into train, validation and test sets."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    subjects = np.unique(dataset.subject_ids)
    if len(subjects) < len(ratios):
        raise ContractError(f"{len(subjects)} subjects cannot fill {len(ratios)} splits")
    order = np.random.default_rng([seed, 104729]).permutation(subjects)
    counts = _split_counts(len(subjects), ratios)
    out, start = [], 0
    for name, k in zip(("train", "val", "test"), counts):
        chosen = set(order[start : start + k].tolist())
        start += k
        index = [i for i, s in enumerate(dataset.subject_ids.tolist()) if s in chosen]
        out.append(dataset.subset(index, name))
    return tuple(out)


# PGM / PPM


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw):
    return (np.asarray(raw, dtype=np.float32) / 255.0).astype(np.float32)


def _tokens(data, count, start):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], start
    while len(tokens) < count:
        while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        begin = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if begin == pos:
            raise FormatError("header ended early", offset=pos)
        tokens.append((data[begin:pos], begin))
    return tokens, pos


def decode_pnm(data):
    """Parse binary PGM (P5) / PPM (P6) bytes into a uint8 (C, H, W) array."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}, expected P5 or P6", offset=0)
    channels = 1 if magic == b"P5" else 3
    tokens, pos = _tokens(data, 3, 2)
    values = []
    for tok, at in tokens:
        try:
            values.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric header field {tok!r}", offset=at) from None
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", offset=tokens[0][1])
    if not 1 <= maxval <= 255:
        raise FormatError(f"only 8-bit rasters supported, maxval is {maxval}", offset=tokens[2][1])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", offset=pos)
    pos += 1
    expected = width * height * channels
    raster = data[pos:]
    if len(raster) != expected:
        raise FormatError(
            f"raster has {len(raster)} bytes, header {width}x{height}x{channels} needs {expected}", offset=pos
        )
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels).transpose(2, 0, 1)
    if maxval != 255:
        arr = np.rint(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return np.ascontiguousarray(arr)


def encode_pnm(raw):
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim == 2:
        raw = raw[None]
    channels, height, width = raw.shape
    if channels not in (1, 3):
        raise FormatError(f"can only write 1 or 3 channels, got {channels}")
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(raw.transpose(1, 2, 0)).tobytes()


def read_image(path):
    """Float (C, H, W) image in [0, 1] from a binary PGM or PPM file."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return from_uint8(decode_pnm(data))
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_image(image, path):
    """Write a float image in [0, 1] as 8-bit PGM (1 channel) or PPM (3 channels)."""
    with open(path, "wb") as fh:
        fh.write(encode_pnm(to_uint8(image)))


# manifest


def write_dataset(out_dir, splits):
    """Write images for each split plus ``manifest.jsonl``; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    lines = []
    for ds in splits:
        ext = ".pgm" if ds.full.shape[1] == 1 else ".ppm"
        for k, (sid, full, occ, mask) in enumerate(ds.items):
            stem = f"{ds.split}_{k:05d}_s{sid:04d}"
            full_rel = os.path.join("images", stem + "_full" + ext)
            occ_rel = os.path.join("images", stem + "_occ" + ext)
            write_image(full, os.path.join(out_dir, full_rel))
            write_image(occ, os.path.join(out_dir, occ_rel))
            lines.append(
                json.dumps(
                    {
                        "subject": sid,
                        "split": ds.split,
                        "full": full_rel,
                        "occluded": occ_rel,
                        "mask": mask.to_list(),
                        "fill": mask.fill_value,
                    },
                    sort_keys=True,
                )
            )
    path = os.path.join(out_dir, "manifest.jsonl")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_manifest(path):
    """Read a manifest into a dict split name -> Dataset (images loaded)."""
    root = os.path.dirname(os.path.abspath(path))
    groups = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                mask = MaskSpec(*rec["mask"], fill_value=rec.get("fill", 0.0))
                entry = (int(rec["subject"]), rec["full"], rec["occluded"], mask)
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
            groups.setdefault(rec.get("split", "all"), []).append(entry)
    out = {}
    for split, entries in groups.items():
        ids = np.array([e[0] for e in entries], dtype=np.int64)
        full = np.stack([read_image(os.path.join(root, e[1])) for e in entries])
        occ = np.stack([read_image(os.path.join(root, e[2])) for e in entries])
        out[split] = Dataset(ids, full, occ, [e[3] for e in entries], split)
    return out


def load_image_directory(root):
    """Faces from ``root/<subject>/<image>.pgm|.ppm``, one subfolder per subject.

    Returns ``(subject id, image)`` pairs like :func:`gen_procedural_faces`,
    so real cropped faces can go through the same masking and splitting.
    Subject ids are assigned in sorted folder-name order.
    """
    folders = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    faces = []
    for sid, folder in enumerate(folders):
        for name in sorted(os.listdir(os.path.join(root, folder))):
            if name.lower().endswith((".pgm", ".ppm")):
                faces.append((sid, read_image(os.path.join(root, folder, name))))
    if not faces:
        raise ContractError(f"no .pgm/.ppm images found under {root}")
    shapes = {img.shape for _, img in faces}
    if len(shapes) > 1:
        raise FormatError(f"images under {root} have mixed shapes {sorted(shapes)}")
    return faces
