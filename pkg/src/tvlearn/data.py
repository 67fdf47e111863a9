"""Image I/O, deterministic noise synthesis, manifests, and persistence.

All randomness is counter-based (Philox) and keyed by explicit integers, so
every noisy image is a pure function of (seed, stream, node); nothing depends
on call order or thread count.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataFormatError
from .grid import GridSpec, ScalarField
from .huber import HuberParams
from .system import ModelParams

_LAMBDA_MAGIC = b"TVLAMBD1"


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian noise: base_sigma everywhere plus extra_sigma inside
    each (i0, j0, di, dj) window.  All sigmas are standard deviations on the
    [0,1] intensity scale."""

    base_sigma: float
    seed: int
    regions: list = field(default_factory=list)

    def __post_init__(self):
        if self.base_sigma < 0.0:
            raise ValueError(f"base_sigma must be >= 0, got {self.base_sigma}")
        for rect, extra in self.regions:
            i0, j0, di, dj = rect
            if min(i0, j0, di, dj) < 0:
                raise ValueError(f"invalid noise region window {rect}")
            if extra < 0.0:
                raise ValueError(f"extra_sigma must be >= 0, got {extra}")

    def check_inside(self, grid: GridSpec) -> None:
        for rect, _ in self.regions:
            i0, j0, di, dj = rect
            if i0 + di > grid.m or j0 + dj > grid.l:
                raise ValueError(
                    f"noise region {rect} exceeds the {grid.m}x{grid.l} grid"
                )


@dataclass(frozen=True)
class TrainingPair:
    clean: ScalarField
    noisy: ScalarField
    id: str

    def __post_init__(self):
        if self.clean.grid != self.noisy.grid:
            raise ValueError("clean and noisy images live on different grids")
        for name, f in (("clean", self.clean), ("noisy", self.noisy)):
            lo, hi = float(f.values.min()), float(f.values.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"{name} image leaves [0,1]: range [{lo}, {hi}]")


def _normal_field(shape, seed: int, stream: int) -> np.ndarray:
    gen = np.random.Generator(
        np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    )
    return gen.standard_normal(shape)


def add_noise(img: ScalarField, spec: NoiseSpec) -> ScalarField:
    """Add the specified Gaussian noise and clamp back into [0,1]."""
    spec.check_inside(img.grid)
    out = img.values.copy()
    if spec.base_sigma > 0.0:
        out = out + spec.base_sigma * _normal_field(img.grid.shape, spec.seed, 0)
    for idx, (rect, extra) in enumerate(spec.regions):
        if extra <= 0.0:
            continue
        i0, j0, di, dj = rect
        patch = _normal_field(img.grid.shape, spec.seed, idx + 1)
        out[i0 : i0 + di, j0 : j0 + dj] += extra * patch[i0 : i0 + di, j0 : j0 + dj]
    return ScalarField(img.grid, np.clip(out, 0.0, 1.0))


def _parse_pgm(raw: bytes, path: str) -> np.ndarray:
    pos = 0

    def skip_separators(p: int) -> int:
        while p < len(raw):
            if raw[p : p + 1].isspace():
                p += 1
            elif raw[p : p + 1] == b"#":
                while p < len(raw) and raw[p : p + 1] != b"\n":
                    p += 1
            else:
                break
        return p

    def token(p: int) -> tuple[bytes, int]:
        p = skip_separators(p)
        start = p
        while p < len(raw) and not raw[p : p + 1].isspace():
            p += 1
        if start == p:
            raise DataFormatError(f"{path}: truncated PGM header", offset=start)
        return raw[start:p], p

    magic, pos = token(pos)
    if magic != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (P5) file", offset=0)
    fields = []
    for _ in range(3):
        tok, pos = token(pos)
        if not re.fullmatch(rb"\d+", tok):
            raise DataFormatError(
                f"{path}: bad PGM header token {tok!r}", offset=pos - len(tok)
            )
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise DataFormatError(
            f"{path}: only 8-bit PGM supported, maxval={maxval}", offset=pos
        )
    pos += 1  # the single whitespace byte after maxval
    data = raw[pos : pos + width * height]
    if len(data) < width * height:
        raise DataFormatError(
            f"{path}: pixel data truncated ({len(data)} of {width * height} bytes)",
            offset=len(raw),
        )
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def load_image(path: str) -> ScalarField:
    """Read an 8-bit grayscale PGM (P5) or PNG into a unit-spacing field with
    intensities in [0,1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        with open(path, "rb") as fh:
            raw = fh.read()
        pixels = _parse_pgm(raw, path)
    elif ext == ".png":
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataFormatError(
                    f"{path}: only 8-bit grayscale PNG supported, mode={im.mode}"
                )
            pixels = np.asarray(im, dtype=np.uint8)
    else:
        raise DataFormatError(f"{path}: unsupported image extension {ext!r}")
    m, l = pixels.shape
    grid = GridSpec(m, l, 1.0)
    return ScalarField(grid, pixels.astype(float) / 255.0)


def save_image(img: ScalarField, path: str) -> None:
    """Write the field as 8-bit grayscale, format chosen by extension.

    Intensities are clipped to [0,1] and quantized with round-half-even, so
    a load/save round trip of an 8-bit file is byte-identical."""
    pixels = np.rint(np.clip(img.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        m, l = pixels.shape
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (l, m))
            fh.write(pixels.tobytes(order="C"))
    elif ext == ".png":
        Image.fromarray(pixels, mode="L").save(path, format="PNG")
    else:
        raise DataFormatError(f"{path}: unsupported image extension {ext!r}")


def save_lambda(lam: ScalarField, path: str) -> None:
    """Persist a weight field as magic + uint32 shape + float64 raster, all
    little-endian, column-major."""
    m, l = lam.grid.shape
    with open(path, "wb") as fh:
        fh.write(_LAMBDA_MAGIC)
        fh.write(np.array([m, l], dtype="<u4").tobytes())
        fh.write(lam.values.astype("<f8").tobytes(order="F"))


def load_lambda(path: str, h: float = 1.0) -> ScalarField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _LAMBDA_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:8]!r}", offset=0)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header", offset=len(raw))
    m, l = (int(v) for v in np.frombuffer(raw[8:16], dtype="<u4"))
    need = 16 + 8 * m * l
    if len(raw) < need:
        raise DataFormatError(
            f"{path}: raster truncated ({len(raw)} of {need} bytes)", offset=len(raw)
        )
    values = np.frombuffer(raw[16:need], dtype="<f8").reshape((m, l), order="F")
    return ScalarField(GridSpec(m, l, h), values.copy())


_PARAM_KEYS = {"gamma", "mu", "beta", "h"}
_NOISE_KEYS = {"seed", "base_sigma"}


def load_manifest(path: str):
    """Read a training manifest: sections [params], [noise], [pairs].

    Returns (pairs, noise_spec, params, grid).  Unknown keys or sections are
    errors; image paths are resolved relative to the manifest file.  Pair k
    gets its noise from stream seed+k so pairs are independent but the whole
    training set is reproducible bit-for-bit.
    """
    import configparser

    if not os.path.exists(path):
        raise DataFormatError(f"manifest not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise DataFormatError(f"{path}: {exc}")
    known = {"params", "noise", "pairs"}
    extra = set(cp.sections()) - known
    if extra:
        raise DataFormatError(f"{path}: unknown section(s) {sorted(extra)}")
    if "pairs" not in cp or not cp["pairs"]:
        raise DataFormatError(f"{path}: no [pairs] section or it is empty")

    pvals = dict(cp["params"]) if "params" in cp else {}
    unknown = set(pvals) - _PARAM_KEYS
    if unknown:
        raise DataFormatError(f"{path}: unknown [params] key(s) {sorted(unknown)}")
    try:
        gamma = float(pvals.get("gamma", 50.0))
        mu = float(pvals.get("mu", 1e-13))
        beta = float(pvals.get("beta", 1e-9))
        h = float(pvals.get("h", 1.0))
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad [params] value: {exc}")

    nvals = dict(cp["noise"]) if "noise" in cp else {}
    region_keys = {k for k in nvals if re.fullmatch(r"region\d+", k)}
    unknown = set(nvals) - _NOISE_KEYS - region_keys
    if unknown:
        raise DataFormatError(f"{path}: unknown [noise] key(s) {sorted(unknown)}")
    try:
        seed = int(nvals.get("seed", 0))
        base_sigma = float(nvals.get("base_sigma", 0.0))
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad [noise] value: {exc}")
    regions = []
    for key in sorted(region_keys, key=lambda k: int(k[len("region") :])):
        toks = nvals[key].split()
        if len(toks) != 5:
            raise DataFormatError(
                f"{path}: {key} needs 'i0 j0 di dj sigma', got {nvals[key]!r}"
            )
        try:
            rect = tuple(int(t) for t in toks[:4])
            extra_sigma = float(toks[4])
        except ValueError as exc:
            raise DataFormatError(f"{path}: bad {key}: {exc}")
        regions.append((rect, extra_sigma))

    pair_keys = sorted(
        cp["pairs"],
        key=lambda k: int(k[len("pair") :]) if re.fullmatch(r"pair\d+", k) else -1,
    )
    for k in pair_keys:
        if not re.fullmatch(r"pair\d+", k):
            raise DataFormatError(f"{path}: unknown [pairs] key {k!r}")

    base_dir = os.path.dirname(os.path.abspath(path))
    pairs = []
    grid = None
    for index, key in enumerate(pair_keys):
        img_path = os.path.join(base_dir, cp["pairs"][key])
        clean = load_image(img_path)
        if grid is None:
            grid = GridSpec(clean.grid.m, clean.grid.l, h)
        elif (clean.grid.m, clean.grid.l) != (grid.m, grid.l):
            raise DataFormatError(
                f"{path}: {key} image shape {clean.grid.shape} does not match "
                f"{(grid.m, grid.l)}"
            )
        clean = ScalarField(grid, clean.values)
        spec_k = NoiseSpec(base_sigma=base_sigma, seed=seed + index, regions=regions)
        noisy = add_noise(clean, spec_k)
        tag = os.path.splitext(os.path.basename(img_path))[0]
        pairs.append(TrainingPair(clean=clean, noisy=noisy, id=f"{tag}#{index}"))

    noise = NoiseSpec(base_sigma=base_sigma, seed=seed, regions=regions)
    params = ModelParams(
        mu=mu, beta=beta, huber=HuberParams(gamma), n_train=len(pairs)
    )
    return pairs, noise, params, grid
