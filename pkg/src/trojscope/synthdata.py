"""Procedural faces, accessory repositories, and the trigger applicators.

Images live in two domains: uint8 storage rasters in [0, 255] and float
rasters in [0, 1] used for training and optimization.  The applicators
accept either (any leading batch dimensions) and return the same dtype.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

OBJECT_CLASSES = ("sunglasses", "hat", "moustache", "bowtie", "mask")
DISTRACTOR = "distractor"

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 170, 40),
    "blue": (30, 60, 225),
    "yellow": (245, 220, 30),
    "cyan": (30, 215, 225),
    "magenta": (225, 40, 205),
    "orange": (250, 140, 20),
    "purple": (115, 35, 165),
    "white": (248, 248, 248),
    "black": (18, 18, 18),
}

ALPHA_THRESHOLD = 0.5
MIN_IMAGE_SIZE = 16

# canonical (row, col) centers as fractions of the image size, native scale 1
PLACEMENT_PRIOR = {
    "sunglasses": (13.0 / 32, 16.0 / 32),
    "hat": (4.0 / 32, 16.0 / 32),
    "moustache": (20.0 / 32, 16.0 / 32),
    "bowtie": (28.0 / 32, 16.0 / 32),
    "mask": (22.0 / 32, 16.0 / 32),
}


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Placement:
    row: int
    col: int
    scale: float

    @property
    def l(self):
        return (self.row, self.col)


@dataclass
class TriggerObject:
    id: str
    object_class: str
    color_label: str
    patch: np.ndarray  # uint8 (h, w, 4), RGBA

    @property
    def native_size(self):
        return tuple(int(v) for v in self.patch.shape[:2])

    @property
    def rgb(self):
        return self.patch[..., :3]

    @property
    def mask(self):
        return self.patch[..., 3] > ALPHA_THRESHOLD * 255

    def manifest_entry(self):
        return {
            "id": self.id,
            "object_class": self.object_class,
            "color_label": self.color_label,
            "native_size": list(self.native_size),
        }


@dataclass
class Repository:
    name: str
    objects: list = field(default_factory=list)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"repository {self.name}: duplicate trigger ids")

    def __len__(self):
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)

    def get(self, trigger_id):
        for o in self.objects:
            if o.id == trigger_id:
                return o
        raise KeyError(trigger_id)

    def find(self, object_class, color_label):
        return [o for o in self.objects if o.object_class == object_class and o.color_label == color_label]

    def extended(self, name, extra):
        return Repository(name, list(self.objects) + list(extra))


# ---------------------------------------------------------------- rescaling

def scaled_size(shape, s):
    h, w = shape[:2]
    return max(1, int(round(h * s))), max(1, int(round(w * s)))


def rescale_nearest(patch, s):
    """Nearest-neighbour rescale of the first two axes by factor ``s``."""
    h, w = patch.shape[:2]
    sh, sw = scaled_size(patch.shape, s)
    ri = np.minimum((np.arange(sh) * h) // sh, h - 1)
    ci = np.minimum((np.arange(sw) * w) // sw, w - 1)
    return patch[ri][:, ci]


def footprint_box(placement, native_size):
    """(top, left, height, width) of a scaled patch centred at ``placement``."""
    sh, sw = scaled_size(native_size, placement.scale)
    return placement.row - sh // 2, placement.col - sw // 2, sh, sw


def fits(placement, native_size, image_shape):
    top, left, sh, sw = footprint_box(placement, native_size)
    return top >= 0 and left >= 0 and top + sh <= image_shape[0] and left + sw <= image_shape[1]


def _footprint(x, trigger, placement):
    image_shape = x.shape[-3:-1]
    if not fits(placement, trigger.native_size, image_shape):
        raise PlacementError(
            f"{trigger.id} at {placement} does not fit inside a {image_shape[0]}x{image_shape[1]} image")
    top, left, sh, sw = footprint_box(placement, trigger.native_size)
    scaled = rescale_nearest(trigger.patch, placement.scale)
    return (slice(top, top + sh), slice(left, left + sw)), scaled


def _rgb_like(x, scaled):
    rgb = scaled[..., :3]
    if x.dtype == np.uint8:
        return rgb
    return (rgb.astype(np.float64) / 255).astype(x.dtype)


def apply(x, trigger, l, s=1.0):
    """Paste ``trigger`` opaquely, centred at ``l`` = (row, col) with scale ``s``.

    Pixels whose rescaled alpha exceeds 0.5 take the trigger colour; the
    rest keep ``x``.  ``x`` is not modified.
    """
    placement = l if isinstance(l, Placement) else Placement(int(l[0]), int(l[1]), float(s))
    x = np.asarray(x)
    (rs, cs), scaled = _footprint(x, trigger, placement)
    out = x.copy()
    m = scaled[..., 3] > ALPHA_THRESHOLD * 255
    region = out[..., rs, cs, :]
    region[..., m, :] = _rgb_like(x, scaled)[m]
    return out


def blend(x, trigger, l, s=1.0, ratio=0.3):
    """Alpha-region blend: ratio*trigger + (1-ratio)*x; uint8 results are floored."""
    if not 0 < ratio <= 1:
        raise ValueError(f"blend ratio must lie in (0, 1], got {ratio}")
    placement = l if isinstance(l, Placement) else Placement(int(l[0]), int(l[1]), float(s))
    x = np.asarray(x)
    (rs, cs), scaled = _footprint(x, trigger, placement)
    out = x.copy()
    m = scaled[..., 3] > ALPHA_THRESHOLD * 255
    region = out[..., rs, cs, :]
    if x.dtype == np.uint8:
        mixed = ratio * scaled[..., :3].astype(np.float64) + (1 - ratio) * region.astype(np.float64)
        mixed = np.floor(mixed + 1e-9).astype(np.uint8)
    else:
        mixed = (ratio * _rgb_like(x, scaled) + (1 - ratio) * region).astype(x.dtype)
    region[..., m, :] = mixed[..., m, :]
    return out


def region_mask(region, shape):
    """Normalise a region (bool mask, iterable of (row, col), or None) to a bool mask."""
    if region is None:
        return np.ones(shape, dtype=bool)
    if isinstance(region, np.ndarray) and region.dtype == bool:
        return region
    mask = np.zeros(shape, dtype=bool)
    pix = list(region)
    if pix:
        rows, cols = zip(*pix)
        mask[list(rows), list(cols)] = True
    return mask


def superimpose_clamped(x, b, region=None):
    """Add perturbation ``b`` to ``x`` on ``region`` and clamp to the valid range.

    uint8 inputs take ``b`` in storage units and clamp to [0, 255];
    float inputs clamp to [0, 1].
    """
    x = np.asarray(x)
    mask = region_mask(region, x.shape[-3:-1])
    out = x.copy()
    if x.dtype == np.uint8:
        summed = np.clip(np.rint(x.astype(np.float64) + b), 0, 255).astype(np.uint8)
    else:
        summed = np.clip(x + b, 0, 1).astype(x.dtype)
    out[..., mask, :] = summed[..., mask, :]
    return out


# ------------------------------------------------------------------- faces

@dataclass
class FaceClassSpec:
    class_id: int
    background: tuple
    skin: tuple
    hair: tuple
    face_radii: tuple  # (ry, rx)
    hair_depth: int
    eye_row: int
    eye_half_gap: int
    eye_color: tuple
    mouth_row: int
    mouth_half_width: int
    mouth_color: tuple
    nose_len: int

    def signature(self):
        """Parameters in comparable units (pixels / 8-bit colour steps)."""
        return np.array(
            [*self.background, *self.skin, *self.hair, *self.face_radii, self.hair_depth, self.eye_row,
             self.eye_half_gap, *self.eye_color, self.mouth_row, self.mouth_half_width, *self.mouth_color,
             self.nose_len], dtype=float)


# per-sample jitter amplitudes (pixels, colour steps)
JITTER_SHIFT = 1
JITTER_COLOR = 10
NOISE_SIGMA = 4.0
_SIG_JITTER = np.array([JITTER_COLOR] * 9 + [JITTER_SHIFT] * 5 + [JITTER_COLOR] * 3 + [JITTER_SHIFT] * 2
                       + [JITTER_COLOR] * 3 + [JITTER_SHIFT], dtype=float)


def _rand_color(rng, lo, hi):
    return tuple(int(v) for v in rng.integers(lo, hi, size=3))


def _sample_class(rng, class_id, size):
    u = size / 32
    skin_base = np.array([[235, 200, 170], [200, 150, 110], [150, 100, 70], [100, 65, 45], [245, 215, 190]])
    skin = np.clip(skin_base[rng.integers(len(skin_base))] + rng.integers(-20, 21, 3), 0, 255)
    return FaceClassSpec(
        class_id=class_id,
        background=_rand_color(rng, 40, 216),
        skin=tuple(int(v) for v in skin),
        hair=_rand_color(rng, 10, 180),
        face_radii=(int(round(rng.integers(11, 14) * u)), int(round(rng.integers(8, 12) * u))),
        hair_depth=int(round(rng.integers(2, 6) * u)),
        eye_row=int(round(rng.integers(12, 15) * u)),
        eye_half_gap=int(round(rng.integers(3, 6) * u)),
        eye_color=_rand_color(rng, 0, 120),
        mouth_row=int(round(rng.integers(21, 25) * u)),
        mouth_half_width=int(round(rng.integers(2, 6) * u)),
        mouth_color=_rand_color(rng, 90, 230),
        nose_len=int(round(rng.integers(2, 5) * u)),
    )


def _separated(a, b):
    diff = np.abs(a.signature() - b.signature())
    return int(np.sum(diff > _SIG_JITTER)) >= 2


def face_class_specs(seed, n_classes, image_size=32):
    rng = np.random.default_rng([seed, 0])
    specs = []
    while len(specs) < n_classes:
        cand = _sample_class(rng, len(specs), image_size)
        if all(_separated(cand, other) for other in specs):
            specs.append(cand)
    return specs


def render_face(spec, rng, size):
    """One jittered sample of a face class as a uint8 (size, size, 3) raster."""
    def jc(color):
        return np.clip(np.asarray(color) + rng.integers(-JITTER_COLOR, JITTER_COLOR + 1, 3), 0, 255)

    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = jc(spec.background)
    dr, dc = rng.integers(-JITTER_SHIFT, JITTER_SHIFT + 1, 2)
    cy, cx = size * 17 / 32 + dr, size / 2 + dc
    yy, xx = np.mgrid[0:size, 0:size]
    ry, rx = spec.face_radii
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    img[face] = jc(spec.skin)
    hair = face & (yy < cy - ry + spec.hair_depth + 1)
    img[hair] = jc(spec.hair)
    eye_r = int(spec.eye_row + dr)
    eye_c = jc(spec.eye_color)
    for side in (-1, 1):
        c0 = int(round(cx + side * spec.eye_half_gap))
        img[eye_r:eye_r + 2, c0 - 1:c0 + 1] = eye_c
    nose_c = np.clip(np.asarray(spec.skin) * 0.8, 0, 255)
    n0 = eye_r + 3
    img[n0:n0 + spec.nose_len, int(round(cx)) - 1:int(round(cx))] = nose_c
    m_r = int(spec.mouth_row + dr)
    m_c = int(round(cx))
    img[m_r:m_r + 2, m_c - spec.mouth_half_width:m_c + spec.mouth_half_width] = jc(spec.mouth_color)
    img += rng.normal(0, NOISE_SIGMA, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class FaceDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    n_classes: int
    image_size: int
    seed: int

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.train_x, self.train_y, self.val_x, self.val_y):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def gen_face_samples(seed, n_classes, per_class, image_size=32, stream=0):
    """Fresh samples of the seed's face classes; ``stream`` selects an
    independent sample sequence (0 is the one used by :func:`gen_faces`)."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image_size must be >= {MIN_IMAGE_SIZE} to draw facial features")
    specs = face_class_specs(seed, n_classes, image_size)
    rng = np.random.default_rng([seed, 1, stream])
    xs = np.empty((n_classes * per_class, image_size, image_size, 3), dtype=np.uint8)
    ys = np.repeat(np.arange(n_classes), per_class)
    for i, c in enumerate(ys):
        xs[i] = render_face(specs[c], rng, image_size)
    return xs, ys


def gen_faces(seed, n_classes=8, per_class=100, image_size=32):
    """Desk-scale face identification data with a per-class 90/10 split."""
    xs, ys = gen_face_samples(seed, n_classes, per_class, image_size, stream=0)
    n_val = max(1, per_class // 10)
    is_val = np.zeros(len(ys), dtype=bool)
    for c in range(n_classes):
        is_val[c * per_class + per_class - n_val:(c + 1) * per_class] = True
    return FaceDataset(xs[~is_val], ys[~is_val], xs[is_val], ys[is_val], n_classes, image_size, seed)


# ----------------------------------------------------------------- triggers

def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / max(ry, 0.5)) ** 2 + ((xx - cx) / max(rx, 0.5)) ** 2 <= 1.0


def _shape_sunglasses(rng):
    lens_w = int(rng.integers(5, 7))
    lens_h = int(rng.integers(4, 6))
    bridge = int(rng.integers(1, 3))
    w = 2 * lens_w + bridge
    m = np.zeros((lens_h, w), dtype=bool)
    if rng.random() < 0.5:
        m[:, :lens_w] = True
        m[:, lens_w + bridge:] = True
        m[-1, [0, lens_w - 1, lens_w + bridge, w - 1]] = False
    else:
        m |= _ellipse(lens_h, w, (lens_h - 1) / 2, (lens_w - 1) / 2, lens_h / 2, lens_w / 2)
        m |= _ellipse(lens_h, w, (lens_h - 1) / 2, lens_w + bridge + (lens_w - 1) / 2, lens_h / 2, lens_w / 2)
    m[lens_h // 2 - int(rng.integers(0, 2)), lens_w:lens_w + bridge] = True
    return m


def _shape_hat(rng):
    w = int(rng.integers(14, 18))
    crown_h = int(rng.integers(4, 7))
    brim_h = int(rng.integers(1, 3))
    inset = int(rng.integers(2, 5))
    m = np.zeros((crown_h + brim_h, w), dtype=bool)
    m[:crown_h, inset:w - inset] = True
    m[crown_h:, :] = True
    if rng.random() < 0.5:
        m[0, inset] = m[0, w - inset - 1] = False
    return m


def _shape_moustache(rng):
    w = int(rng.integers(9, 13))
    h = int(rng.integers(3, 5))
    yy, xx = np.mgrid[0:h, 0:w]
    half = (w - 1) / 2
    # droops toward the ends
    droop = (np.abs(xx - half) / max(half, 1)) ** 2 * (h - 1)
    m = (yy >= droop - 0.5) & (yy <= droop + 1.6)
    m[: max(1, h - 2), int(half) - 1:int(half) + 2] = True
    return m


def _shape_bowtie(rng):
    w = int(rng.integers(8, 12))
    h = int(rng.integers(5, 7))
    yy, xx = np.mgrid[0:h, 0:w]
    mid = (h - 1) / 2
    half = (w - 1) / 2
    dist = np.abs(xx - half) / max(half, 1)
    m = np.abs(yy - mid) <= mid * dist + 0.6
    knot = int(rng.integers(1, 3))
    cols = slice(int(half) - knot // 2, int(half) + 1 + knot // 2)
    m[:, cols] |= (np.abs(yy - mid) <= 1.2)[:, cols]
    return m


def _shape_mask(rng):
    w = int(rng.integers(12, 16))
    h = int(rng.integers(6, 9))
    m = _ellipse(h, w, (h - 1) / 2, (w - 1) / 2, h / 2 + 0.6, w / 2 + 0.6)
    m[: h // 2, 1:-1] = True
    return m


_SHAPES = {
    "sunglasses": _shape_sunglasses,
    "hat": _shape_hat,
    "moustache": _shape_moustache,
    "bowtie": _shape_bowtie,
    "mask": _shape_mask,
}


def _largest_component(m):
    """Keep the largest 4-connected component of a boolean mask."""
    seen = np.zeros_like(m)
    best = []
    for r0, c0 in zip(*np.nonzero(m)):
        if seen[r0, c0]:
            continue
        stack, comp = [(r0, c0)], []
        seen[r0, c0] = True
        while stack:
            r, c = stack.pop()
            comp.append((r, c))
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < m.shape[0] and 0 <= cc < m.shape[1] and m[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    stack.append((rr, cc))
        if len(comp) > len(best):
            best = comp
    out = np.zeros_like(m)
    if best:
        rows, cols = zip(*best)
        out[list(rows), list(cols)] = True
    return out


def _trim(m):
    rows = np.nonzero(m.any(axis=1))[0]
    cols = np.nonzero(m.any(axis=0))[0]
    return m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def _make_patch(mask, color, rng, shade_jitter):
    mask = _trim(_largest_component(mask))
    base = np.clip(np.asarray(color) + rng.integers(-shade_jitter, shade_jitter + 1, 3), 0, 255)
    patch = np.zeros(mask.shape + (4,), dtype=np.uint8)
    patch[..., :3] = base.astype(np.uint8)
    patch[..., 3] = np.where(mask, 255, 0)
    return patch


def default_trigger_spec():
    """All (object_class, color) pairs: 5 classes x 10 colours."""
    return [(oc, c) for oc in OBJECT_CLASSES for c in COLORS]


def gen_trigger_repo(seed, spec=None, name="R", shade_jitter=12):
    """One :class:`TriggerObject` per (object_class, color) pair of ``spec``."""
    spec = default_trigger_spec() if spec is None else spec
    rng = np.random.default_rng([seed, 2])
    objects = []
    for oc, color in spec:
        if oc not in _SHAPES:
            raise ValueError(f"unknown object class {oc!r}")
        if color not in COLORS:
            raise ValueError(f"unknown color {color!r}")
        m = _SHAPES[oc](rng)
        objects.append(TriggerObject(f"{name}-{oc}-{color}", oc, color, _make_patch(m, COLORS[color], rng, shade_jitter)))
    return Repository(name, objects)


def nearest_color(rgb):
    rgb = np.asarray(rgb, dtype=float)
    return min(COLORS, key=lambda c: float(np.sum((np.asarray(COLORS[c]) - rgb) ** 2)))


def gen_distractors(seed, n, max_size=14):
    """Seeded polygons/blobs standing in for generic object photos."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for i in range(n):
        h = int(rng.integers(4, max_size + 1))
        w = int(rng.integers(4, max_size + 1))
        kind = rng.integers(3)
        if kind == 0:
            m = _ellipse(h, w, (h - 1) / 2, (w - 1) / 2, h / 2, w / 2)
        elif kind == 1:
            yy, xx = np.mgrid[0:h, 0:w]
            m = xx * (h - 1) >= (w - 1) * yy * rng.uniform(0.2, 1.0)
            m |= yy >= h - 2
        else:
            m = np.zeros((h, w), dtype=bool)
            for _ in range(3):
                cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
                m |= _ellipse(h, w, cy, cx, rng.uniform(1.5, h / 2 + 1), rng.uniform(1.5, w / 2 + 1))
        if not m.any():
            m[h // 2, w // 2] = True
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        patch = _make_patch(m, color, rng, 0)
        out.append(TriggerObject(f"D-{i:03d}", DISTRACTOR, nearest_color(color), patch))
    return out


def gen_repositories(seed, spec=None, n_distractors=101):
    """Attacker set R, defender set S (different rasters, same coverage), and S+."""
    r = gen_trigger_repo(seed, spec, name="R")
    s = gen_trigger_repo(seed + 7919, spec, name="S")
    s_plus = s.extended("S+", gen_distractors(seed, n_distractors))
    return r, s, s_plus


# ---------------------------------------------------------------- placement

def canonical_placement(object_class, image_size=32, scale=1.0):
    fr, fc = PLACEMENT_PRIOR[object_class]
    return Placement(int(round(fr * image_size)), int(round(fc * image_size)), float(scale))


def clamp_placement(placement, native_size, image_shape):
    """Shift a placement minimally so its footprint lies inside the image."""
    top, left, sh, sw = footprint_box(placement, native_size)
    if sh > image_shape[0] or sw > image_shape[1]:
        raise PlacementError("scaled patch larger than the image")
    dr = max(0, -top) - max(0, top + sh - image_shape[0])
    dc = max(0, -left) - max(0, left + sw - image_shape[1])
    return Placement(placement.row + dr, placement.col + dc, placement.scale)


# ---------------------------------------------------------------------- I/O

def write_pam(path, img, comments=()):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    h, w, d = img.shape
    maxval = 65535 if img.dtype == np.uint16 else 255
    tupl = {1: "GRAYSCALE", 3: "RGB", 4: "RGB_ALPHA"}[d]
    lines = ["P7"] + [f"# {c}" for c in comments] + [
        f"WIDTH {w}", f"HEIGHT {h}", f"DEPTH {d}", f"MAXVAL {maxval}", f"TUPLTYPE {tupl}", "ENDHDR"]
    data = img.astype(">u2").tobytes() if maxval > 255 else img.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(data)


def read_pam(path, with_comments=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    header = {}
    comments = []
    pos = 0
    first = True
    while True:
        end = blob.index(b"\n", pos)
        line = blob[pos:end].decode("ascii").strip()
        pos = end + 1
        if first:
            if line != "P7":
                raise ValueError(f"{path}: not a PAM (P7) file")
            first = False
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        if line == "ENDHDR":
            break
        if line:
            key, _, val = line.partition(" ")
            header[key] = val.strip()
    h, w, d = int(header["HEIGHT"]), int(header["WIDTH"]), int(header["DEPTH"])
    maxval = int(header["MAXVAL"])
    if maxval > 255:
        img = np.frombuffer(blob, dtype=">u2", count=h * w * d, offset=pos).astype(np.uint16)
    else:
        img = np.frombuffer(blob, dtype=np.uint8, count=h * w * d, offset=pos).copy()
    img = img.reshape(h, w, d)
    return (img, comments) if with_comments else img


def save_repository(repo, directory):
    os.makedirs(directory, exist_ok=True)
    for o in repo:
        write_pam(os.path.join(directory, f"{o.id}.pam"), o.patch)
    manifest = {"name": repo.name, "objects": [o.manifest_entry() for o in repo]}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_repository(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    objects = []
    for e in manifest["objects"]:
        patch = read_pam(os.path.join(directory, f"{e['id']}.pam"))
        if list(patch.shape[:2]) != list(e["native_size"]):
            raise ValueError(f"{e['id']}: raster size disagrees with manifest")
        objects.append(TriggerObject(e["id"], e["object_class"], e["color_label"], patch))
    return Repository(manifest["name"], objects)


def save_dataset(ds, directory):
    os.makedirs(directory, exist_ok=True)
    entries = []
    for split, xs, ys in (("train", ds.train_x, ds.train_y), ("val", ds.val_x, ds.val_y)):
        sub = os.path.join(directory, split)
        os.makedirs(sub, exist_ok=True)
        for i, (img, label) in enumerate(zip(xs, ys)):
            fname = f"{split}/{i:05d}.pam"
            write_pam(os.path.join(directory, fname), img)
            entries.append({"file": fname, "label": int(label), "split": split})
    meta = {"seed": ds.seed, "n_classes": ds.n_classes, "image_size": ds.image_size,
            "digest": ds.digest(), "images": entries}
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory):
    with open(os.path.join(directory, "dataset.json")) as fh:
        meta = json.load(fh)
    parts = {"train": ([], []), "val": ([], [])}
    for e in meta["images"]:
        parts[e["split"]][0].append(read_pam(os.path.join(directory, e["file"])))
        parts[e["split"]][1].append(e["label"])
    size = meta["image_size"]

    def stack(xs):
        return np.stack(xs) if xs else np.zeros((0, size, size, 3), np.uint8)

    return FaceDataset(stack(parts["train"][0]), np.array(parts["train"][1], dtype=np.int64),
                       stack(parts["val"][0]), np.array(parts["val"][1], dtype=np.int64),
                       meta["n_classes"], size, meta["seed"])
