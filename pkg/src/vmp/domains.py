"""Synthetic domain-shift datasets: two-moons, Gaussian blobs, tiny glyph images."""

from dataclasses import dataclass, field

import numpy as np

from vmp.errors import ContractError

CORRUPTIONS = ("gauss_noise", "blur", "contrast")
GLYPH_SIZE = 8
_GLYPH_SEED = 1234  # templates are shared by every dataset regardless of its seed


@dataclass(frozen=True)
class ShiftSpec:
    rotation_deg: float = 0.0
    translation: tuple = (0.0, 0.0)
    noise_sigma: float = 0.0
    corruption: str = "none"
    severity: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        if not 0 <= self.severity <= 5:
            raise ContractError("severity must lie in [0, 5]")
        if (self.severity == 0) != (self.corruption == "none"):
            raise ContractError("severity 0 goes with corruption 'none' and only with it")
        if self.corruption != "none" and self.corruption not in CORRUPTIONS:
            raise ContractError(f"unknown corruption {self.corruption!r}")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "moons"  # moons | blobs | tinygrid
    n_per_class: int = 500
    classes: int = 2
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0
    noise: float = 0.1  # moons jitter, blob std, or glyph pixel noise

    def __post_init__(self):
        if self.kind not in ("moons", "blobs", "tinygrid"):
            raise ContractError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "moons" and self.classes != 2:
            raise ContractError("moons has exactly two classes")
        if self.n_per_class < 1 or self.classes < 1:
            raise ContractError("dataset must be non-empty")


def rotate(points, degrees):
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return points @ np.array([[c, s], [-s, c]])


def _moons(spec, rng):
    n = spec.n_per_class
    t_out = rng.uniform(0.0, np.pi, n)
    t_in = rng.uniform(0.0, np.pi, n)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)])
    x = np.vstack([outer, inner])
    y = np.repeat([0, 1], n)
    if spec.noise:
        x = x + rng.normal(0.0, spec.noise, x.shape)
    return x, y


def blob_centers(classes, radius=3.0):
    ang = 2 * np.pi * np.arange(classes) / classes
    return radius * np.column_stack([np.cos(ang), np.sin(ang)])


def _blobs(spec, rng):
    centers = blob_centers(spec.classes)
    y = np.repeat(np.arange(spec.classes), spec.n_per_class)
    x = centers[y] + rng.normal(0.0, spec.noise, (y.size, 2))
    return x, y


def glyph_templates(classes):
    """Fixed binary 8x8 glyphs, one per class, with pairwise-distinct patterns."""
    g = np.random.default_rng(_GLYPH_SEED)
    out = []
    while len(out) < classes:
        cand = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
        for _ in range(3):  # three random strokes
            r0, c0 = g.integers(1, GLYPH_SIZE - 1, 2)
            if g.random() < 0.5:
                cand[r0, max(c0 - 3, 0):c0 + 3] = 1.0
            else:
                cand[max(r0 - 3, 0):r0 + 3, c0] = 1.0
        if all(np.abs(cand - t).sum() >= 6 for t in out):
            out.append(cand)
    return np.stack(out)


def _tinygrid(spec, rng):
    tmpl = glyph_templates(spec.classes)
    y = np.repeat(np.arange(spec.classes), spec.n_per_class)
    x = np.empty((y.size, 1, GLYPH_SIZE, GLYPH_SIZE))
    shifts = rng.integers(-1, 2, (y.size, 2))
    for n, lab in enumerate(y):
        x[n, 0] = np.roll(tmpl[lab], tuple(shifts[n]), axis=(0, 1))
    x = np.clip(x + rng.normal(0.0, spec.noise, x.shape), 0.0, 1.0)
    return x, y


def generate(spec):
    """(inputs, labels) for ``spec``; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    x, y = {"moons": _moons, "blobs": _blobs, "tinygrid": _tinygrid}[spec.kind](spec, rng)
    sh = spec.shift
    if spec.kind == "tinygrid":
        if sh.corruption != "none":
            x = corrupt(x, sh.corruption, sh.severity, spec.seed + 1)
        if sh.noise_sigma:
            x = x + rng.normal(0.0, sh.noise_sigma, x.shape)
    else:
        if sh.rotation_deg:
            x = rotate(x, sh.rotation_deg)
        x = x + np.asarray(sh.translation, dtype=np.float64)
        if sh.noise_sigma:
            x = x + rng.normal(0.0, sh.noise_sigma, x.shape)
    return x, y


def _box_blur(images, width):
    if width == 1:
        return images.copy()
    r = width // 2
    padded = np.pad(images, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    h, w = images.shape[2:]
    out = np.zeros_like(images)
    for i in range(width):
        for j in range(width):
            out += padded[:, :, i:i + h, j:j + w]
    return out / (width * width)


def corrupt(images, kind, severity, seed):
    """Apply one corruption at ``severity`` in [1, 5]; output is clamped to the input range."""
    if kind not in CORRUPTIONS:
        raise ContractError(f"unknown corruption {kind!r}")
    if not 1 <= severity <= 5:
        raise ContractError("severity must lie in [1, 5]")
    images = np.asarray(images, dtype=np.float64)
    lo, hi = images.min(), images.max()
    if kind == "gauss_noise":
        z = np.random.default_rng(seed).standard_normal(images.shape)
        out = images + 0.04 * severity * z
    elif kind == "blur":
        out = _box_blur(images, 2 * severity - 1)
    else:
        axes = tuple(range(1, images.ndim))
        mu = images.mean(axis=axes, keepdims=True)
        out = mu + (images - mu) * (1.0 - 0.15 * severity)
    return np.clip(out, lo, hi)


def split_source(x, y, fraction=0.8, seed=0):
    """Stratified split; returns ((x_train, y_train), (x_hold, y_hold))."""
    if not 0.0 < fraction < 1.0:
        raise ContractError("fraction must lie strictly between 0 and 1")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if idx.size < 2:
            raise ContractError(f"class {c} has fewer than 2 samples")
        idx = rng.permutation(idx)
        k = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        train_idx.append(idx[:k])
        hold_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    ho = np.sort(np.concatenate(hold_idx))
    return (x[tr], y[tr]), (x[ho], y[ho])


def corruption_stream(spec, kinds=CORRUPTIONS, severities=(1, 2, 3, 4, 5), batch_size=64, seed=0):
    """Ordered (domain_id, kind, severity, x, y) batches over kinds x severities.

    Each domain draws fresh clean samples, corrupts them, and is cut into
    batches in a seeded shuffled order.
    """
    rng = np.random.default_rng(seed)
    out = []
    for d, (kind, sev) in enumerate((k, s) for k in kinds for s in severities):
        dseed = int(rng.integers(2**31))
        x, y = generate(DatasetSpec("tinygrid", spec.n_per_class, spec.classes, ShiftSpec(), dseed, spec.noise))
        x = corrupt(x, kind, sev, dseed + 7)
        order = np.random.default_rng(dseed).permutation(len(y))
        for s in range(0, len(y), batch_size):
            sel = order[s:s + batch_size]
            out.append((f"{kind}-{sev}", kind, sev, x[sel], y[sel]))
    return out
