"""Synthetic blob datasets, Gaussian noise, dihedral augmentation and PGM I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blindspot import derive_seed

STYLES = ("soma", "plaque")


@dataclass(frozen=True)
class ImageSample:
    clean: np.ndarray  # H×W in [0, 1]
    label: np.ndarray  # H×W in {0, 1}
    noisy: np.ndarray | None = None
    seed: int = 0
    sigma: float | None = None
    meta: dict = field(default_factory=dict)

    @staticmethod
    def as_batch(img: np.ndarray) -> np.ndarray:
        """H×W → 1×1×H×W."""
        return np.asarray(img, dtype=np.float64)[None, None]


def _gaussian(yy, xx, cy, cx, s):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))


def gen_blobs(count: int, size: int, blob_count_range: tuple[int, int] = (2, 5),
              style: str = "soma", seed: int = 0) -> list[ImageSample]:
    """Dark images with bright Gaussian-profile blobs and their binary labels.

    ``soma`` blobs are single round Gaussians (radius 3-6 px at size 64);
    ``plaque`` blobs are 2-4 overlapping offset Gaussians. A pixel is labelled
    foreground where a blob's contribution exceeds half of that blob's peak.
    """
    lo, hi = blob_count_range
    if count < 0 or size < 4:
        raise ValueError(f"need count >= 0 and size >= 4, got count={count}, size={size}")
    if lo < 0 or hi < lo:
        raise ValueError(f"degenerate blob_count_range {blob_count_range}")
    if style not in STYLES:
        raise ValueError(f"style must be one of {STYLES}, got {style!r}")

    scale = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    samples = []
    for i in range(count):
        s_i = derive_seed(seed, i)
        rng = np.random.default_rng(s_i)
        background = rng.uniform(0.05, 0.15)
        blobs = np.zeros((size, size))
        label = np.zeros((size, size), dtype=bool)
        n_blobs = int(rng.integers(lo, hi + 1))
        for _ in range(n_blobs):
            amp = rng.uniform(0.55, 0.8)
            radius = rng.uniform(3.0, 6.0) * scale
            margin = radius + 1.0
            cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
            if style == "soma":
                s = radius / np.sqrt(2.0 * np.log(2.0))
                profile = _gaussian(yy, xx, cy, cx, s)
            else:
                profile = np.zeros((size, size))
                for _ in range(int(rng.integers(2, 5))):
                    oy, ox = rng.normal(0.0, 0.6 * radius, size=2)
                    s = rng.uniform(0.5, 0.9) * radius / np.sqrt(2.0 * np.log(2.0))
                    profile += _gaussian(yy, xx, cy + oy, cx + ox, s)
                profile /= profile.max()
            contribution = amp * profile
            label |= contribution > 0.5 * amp
            blobs += contribution
        clean = np.clip(background + blobs, 0.0, 1.0)
        samples.append(ImageSample(clean, label.astype(np.float64), seed=s_i,
                                   meta={"style": style, "background": background, "index": i}))
    return samples


def box_muller(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
    return z.reshape(shape)


def add_gaussian_noise(sample: ImageSample, sigma: float, seed: int) -> ImageSample:
    """Return ``sample`` with ``noisy = clean + N(0, sigma^2)`` (unclamped)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    noisy = sample.clean + sigma * box_muller(rng, sample.clean.shape)
    return replace(sample, noisy=noisy, sigma=float(sigma), meta={**sample.meta, "noise_seed": seed})


def make_noisy_set(count: int, size: int, sigma: float, seed: int, style: str = "soma",
                   blob_count_range: tuple[int, int] = (2, 5)) -> list[ImageSample]:
    clean = gen_blobs(count, size, blob_count_range, style, seed)
    return [add_gaussian_noise(s, sigma, derive_seed(seed, i, 7919)) for i, s in enumerate(clean)]


def augment(sample: ImageSample) -> list[ImageSample]:
    """The 8 dihedral variants: 4 rotations, each with and without a flip."""
    h, w = sample.clean.shape
    if h != w:
        raise ValueError(f"augment needs a square image, got {h}×{w}")

    def tf(a, k, flip):
        if a is None:
            return None
        a = np.rot90(a, k)
        return np.ascontiguousarray(a[:, ::-1] if flip else a)

    out = []
    for flip in (False, True):
        for k in range(4):
            out.append(replace(sample, clean=tf(sample.clean, k, flip), label=tf(sample.label, k, flip),
                               noisy=tf(sample.noisy, k, flip), meta={**sample.meta, "rot90": k, "flip": flip}))
    return out


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive (train, test) index arrays."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------- PGM

_TOKEN = re.compile(rb"\S+")


class PGMError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError(f"truncated header at byte {pos}")
        if data[pos:pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise PGMError(f"unterminated comment at byte {pos}")
            pos = nl + 1
            continue
        m = _TOKEN.match(data, pos)
        tokens.append(m.group())
        pos = m.end()
    return tokens, pos


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise PGMError(f"bad magic {data[:2]!r} at byte 0, expected b'P5'")
    tokens, pos = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"non-integer header field before byte {pos}: {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise PGMError(f"invalid dimensions {width}×{height} before byte {pos}")
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval} before byte {pos}, only 255")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PGMError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    payload = data[pos:pos + width * height]
    if len(payload) < width * height:
        raise PGMError(f"truncated payload at byte {pos + len(payload)}: expected {width * height} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4:
        img = img[0, 0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def load_pgm(path: str | Path) -> np.ndarray:
    try:
        return decode_pgm(Path(path).read_bytes())
    except PGMError as exc:
        raise PGMError(f"{path}: {exc}") from None


def save_pgm(img: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_pgm(img))


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestRow:
    index: int
    clean_path: str
    noisy_path: str
    label_path: str
    sigma: float
    seed: int

    def line(self) -> str:
        return f"{self.index},{self.clean_path},{self.noisy_path},{self.label_path},{self.sigma:g},{self.seed}"


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        idx, clean, noisy, label, sigma, seed = parts
        rows.append(ManifestRow(int(idx), clean, noisy, label, float(sigma), int(seed)))
    return rows


def write_dataset(samples: list[ImageSample], sigmas: list[float], out: Path, seed: int) -> list[ManifestRow]:
    """Write clean/label PGMs once per sample and one noisy PGM per sigma."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        clean_name, label_name = f"clean_{i:04d}.pgm", f"label_{i:04d}.pgm"
        save_pgm(s.clean, out / clean_name)
        save_pgm(s.label, out / label_name)
        for j, sigma in enumerate(sigmas):
            noise_seed = derive_seed(seed, i, j, 7919)
            noisy = add_gaussian_noise(s, sigma, noise_seed)
            noisy_name = f"noisy_{i:04d}.pgm" if len(sigmas) == 1 else f"noisy_{i:04d}_s{j}.pgm"
            save_pgm(noisy.noisy, out / noisy_name)
            rows.append(ManifestRow(len(rows), clean_name, noisy_name, label_name, sigma, noise_seed))
    (out / "manifest.csv").write_text("".join(r.line() + "\n" for r in rows))
    return rows


def load_dataset(root: str | Path, require_labels: bool = False) -> list[ImageSample]:
    """Load a manifest directory; missing clean/label files become None / zeros."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: no manifest")
    samples = []
    for row in read_manifest(manifest):
        noisy = load_pgm(root / row.noisy_path)
        clean = load_pgm(root / row.clean_path) if row.clean_path and (root / row.clean_path).exists() else None
        label_file = root / row.label_path if row.label_path else None
        if label_file is not None and label_file.exists():
            label = (load_pgm(label_file) >= 0.5).astype(np.float64)
        elif require_labels:
            raise FileNotFoundError(f"missing label file for sample {row.index}: {label_file or '(none listed)'}")
        else:
            label = None
        samples.append(ImageSample(clean, label, noisy, seed=row.seed, sigma=row.sigma,
                                   meta={"index": row.index, "noisy_path": row.noisy_path}))
    return samples
