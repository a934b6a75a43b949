"""Images on disk, synthetic blur datasets, manifests and training patches.

Images are float arrays ``[C,H,W]`` in [0, 1]. On disk they are binary
portable graymaps/pixmaps (P5/P6) at 8 or 16 bits.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from kpdeblur.blur import PixelKernelField, flip_field, load_field, reblur, save_field, synth_kernel_field
from kpdeblur.errors import ParameterError, ParseError, UsageError, ValidationError
from kpdeblur.numerics import Tensor, no_grad

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


# -- portable anymap codec ----------------------------------------------------
def _header_tokens(buf, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, pos, n = [], 2, len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise ParseError("truncated header", pos)
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit():
            raise ParseError(f"expected a decimal number, got {tok[:16]!r}", start)
        tokens.append(int(tok))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    return tokens, pos + 1


def decode_pnm(buf):
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ParseError("not a binary P5/P6 image", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    (w, h, maxval), start = _header_tokens(buf, 3)
    if w < 1 or h < 1:
        raise ParseError(f"bad dimensions {w}x{h}", start)
    if not 0 < maxval < 65536:
        raise ParseError(f"maxval {maxval} out of range", start)
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dt.itemsize
    if len(buf) - start < need:
        raise ParseError(f"pixel data truncated: need {need} bytes, have {len(buf) - start}", len(buf))
    px = np.frombuffer(buf, dtype=dt, count=w * h * channels, offset=start)
    if px.max(initial=0) > maxval:
        bad = int(np.argmax(px > maxval))
        raise ParseError(f"sample exceeds maxval {maxval}", start + bad * dt.itemsize)
    img = px.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64) / maxval
    return img


def encode_pnm(img, bits=16):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ParameterError(f"expected [1|3,H,W] image, got shape {img.shape}")
    if bits not in (8, 16):
        raise ParameterError(f"bits must be 8 or 16, got {bits}")
    c, h, w = img.shape
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    px = q.transpose(1, 2, 0).astype(">u2" if bits == 16 else "u1")
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + px.tobytes()


def load_image(path):
    return decode_pnm(Path(path).read_bytes())


def save_image(path, img, bits=16):
    Path(path).write_bytes(encode_pnm(img, bits))


# -- procedural sharp images --------------------------------------------------
def toy_image(size=64, seed=0):
    """Piecewise-smooth RGB scene: shaded background, shapes, edges and texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((3, size, size))
    gy, gx = rng.uniform(-0.3, 0.3, 2)
    for c in range(3):
        img[c] = rng.uniform(0.3, 0.7) + gy * (yy - 0.5) + gx * (xx - 0.5)
    for _ in range(rng.integers(4, 8)):
        color = rng.uniform(0.05, 0.95, 3)[:, None, None]
        kind = rng.integers(3)
        cy, cx = rng.uniform(0.1, 0.9, 2)
        if kind == 0:
            hh, hw = rng.uniform(0.08, 0.3, 2)
            mask = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < hw)
        elif kind == 1:
            ry, rx = rng.uniform(0.06, 0.25, 2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        else:
            th = rng.uniform(0, np.pi)
            dist = np.abs((yy - cy) * np.cos(th) - (xx - cx) * np.sin(th))
            mask = dist < rng.uniform(0.01, 0.04)
        img = np.where(mask[None], color, img)
    # mild stripes so every image carries some mid-frequency content
    f, th = rng.uniform(4, 10), rng.uniform(0, np.pi)
    img += 0.06 * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)))[None]
    img = gaussian_filter(img, sigma=(0, 0.5, 0.5), mode="reflect")
    return np.clip(img, 0.0, 1.0)


def write_toy_images(out_dir, count, size=64, seed=0, bits=8):
    """Write ``count`` procedural sharp images; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    paths = []
    for i, child in enumerate(ss.spawn(count)):
        p = out_dir / f"toy_{i:03d}.ppm"
        save_image(p, toy_image(size, int(child.generate_state(1)[0])), bits=bits)
        paths.append(p)
    return paths


# -- manifests ----------------------------------------------------------------
@dataclass
class ManifestEntry:
    sharp: str
    blurry: str
    kernel_field: str = None
    seed: int = None
    split: str = "train"

    def to_json(self):
        rec = {"sharp": self.sharp, "blurry": self.blurry}
        if self.kernel_field is not None:
            rec["kernel_field"] = self.kernel_field
        rec["seed"] = self.seed
        rec["split"] = self.split
        return json.dumps(rec, sort_keys=False)


@dataclass
class DatasetManifest:
    """Entries with paths relative to ``root``."""

    root: Path
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def split(self, name):
        return DatasetManifest(self.root, [e for e in self.entries if e.split == name])

    def path(self, rel):
        return Path(self.root) / rel

    def to_text(self):
        return "".join(e.to_json() + "\n" for e in self.entries)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise UsageError(f"manifest {path} does not exist")
        entries = []
        offset = 0
        for n, line in enumerate(path.read_bytes().splitlines(keepends=True)):
            text = line.decode("utf-8").strip()
            if text:
                try:
                    rec = json.loads(text)
                    entries.append(ManifestEntry(rec["sharp"], rec["blurry"], rec.get("kernel_field"),
                                                 rec.get("seed"), rec.get("split", "train")))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"bad manifest record on line {n + 1}: {exc}", offset) from exc
            offset += len(line)
        return cls(path.parent, entries)

    def validate(self):
        for e in self.entries:
            for rel in (e.sharp, e.blurry) + ((e.kernel_field,) if e.kernel_field else ()):
                if not self.path(rel).exists():
                    raise ValidationError(f"manifest references missing file {rel}")
        return self


@dataclass
class Sample:
    sharp: np.ndarray
    blurry: np.ndarray
    field: PixelKernelField = None
    seed: int = None
    name: str = ""


def load_samples(manifest, need_fields=False):
    out = []
    for e in manifest.entries:
        x = load_image(manifest.path(e.sharp))
        y = load_image(manifest.path(e.blurry))
        if x.shape != y.shape:
            raise ValidationError(f"{e.sharp} and {e.blurry} differ in shape")
        f = None
        if e.kernel_field:
            f = load_field(manifest.path(e.kernel_field))
            if (f.H, f.W) != x.shape[-2:]:
                raise ValidationError(f"kernel field {e.kernel_field} is {f.H}x{f.W}, image is {x.shape[-2:]}")
        elif need_fields:
            raise ValidationError(f"entry {e.sharp} has no kernel field")
        out.append(Sample(x, y, f, e.seed, Path(e.sharp).stem))
    return out


@dataclass
class SynthParams:
    max_len: float = 3.0
    smoothness: float = 8.0
    test_count: int = 0
    bits: int = 16


def synth_dataset(sharp_dir, out_dir, k=9, params=None, seed=0):
    """Blur every image in ``sharp_dir`` with its own synthetic field.

    Writes ``blurry/``, ``fields/`` and ``manifest.jsonl`` under ``out_dir``;
    the last ``params.test_count`` images (in name order) form the test split.
    """
    params = params or SynthParams()
    sharp_dir, out_dir = Path(sharp_dir), Path(out_dir)
    files = sorted(p for p in sharp_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if sharp_dir.is_dir() else []
    if not files:
        raise UsageError(f"no input images in {sharp_dir}")
    (out_dir / "blurry").mkdir(parents=True, exist_ok=True)
    (out_dir / "fields").mkdir(parents=True, exist_ok=True)
    (out_dir / "sharp").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(len(files))
    entries = []
    for i, p in enumerate(files):
        try:
            x = load_image(p)
        except (ParseError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        s = int(seeds[i])
        h, w = x.shape[-2:]
        fld = synth_kernel_field(h, w, k, seed=s, max_len=params.max_len, smoothness=params.smoothness)
        with no_grad():
            y = reblur(Tensor(x[None], dtype=np.float64), fld).data[0]
        stem, ext = p.stem, ("pgm" if x.shape[0] == 1 else "ppm")
        save_image(out_dir / "sharp" / f"{stem}.{ext}", x, bits=params.bits)
        save_image(out_dir / "blurry" / f"{stem}.{ext}", y, bits=params.bits)
        save_field(out_dir / "fields" / f"{stem}.fdt", fld, seed=s)
        entries.append(ManifestEntry(f"sharp/{stem}.{ext}", f"blurry/{stem}.{ext}", f"fields/{stem}.fdt", s))
    if not entries:
        raise UsageError(f"no input images could be read from {sharp_dir}")
    for e in entries[len(entries) - params.test_count :] if params.test_count else []:
        e.split = "test"
    manifest = DatasetManifest(out_dir, entries)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


# -- patches ------------------------------------------------------------------
def sample_patch(pair, size, rng, flips=True):
    """Aligned random crop of sharp, blurry and field, with optional mirroring.

    Always draws the same number of random values so the stream stays aligned
    whatever the image size.
    """
    h, w = pair.sharp.shape[-2:]
    if size > min(h, w):
        raise ParameterError(f"patch size {size} exceeds image {h}x{w}")
    if size % 4:
        raise ParameterError(f"patch size {size} must be divisible by 4")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    fh, fv = rng.random(2) < 0.5
    fh, fv = bool(fh and flips), bool(fv and flips)
    return crop_pair(pair, top, left, size, fh, fv), (top, left, fh, fv)


def crop_pair(pair, top, left, size, fh=False, fv=False):
    win = (Ellipsis, slice(top, top + size), slice(left, left + size))
    x, y = pair.sharp[win], pair.blurry[win]
    f = pair.field
    if f is not None:
        f = PixelKernelField(Tensor(f.numpy()[:, top : top + size, left : left + size], dtype=f.weights.dtype))
    if fh:
        x, y = x[..., ::-1], y[..., ::-1]
        f = flip_field(f, "h") if f is not None else None
    if fv:
        x, y = x[..., ::-1, :], y[..., ::-1, :]
        f = flip_field(f, "v") if f is not None else None
    return replace(pair, sharp=np.ascontiguousarray(x), blurry=np.ascontiguousarray(y), field=f)
