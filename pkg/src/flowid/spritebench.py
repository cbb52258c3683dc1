"""Procedural generation of InjuredSprites: a synthetic benchmark of sprite
faces with per-identity reference portraits, injured portraits with
ground-truth injury masks, accessory-augmented portraits for attribute
training, prompts over the model vocabulary, and a JSON manifest.

Everything is a deterministic function of the benchmark seed: identity
parameters derive from (seed, identity index), and every rendered file records
the integer sub-seed that produced it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

SPRITE_SIZE = 32
BG_COLOR = (40, 42, 52)

SKIN_TONES = ((247, 208, 165), (232, 190, 140), (210, 160, 120), (180, 125, 90), (140, 92, 60), (105, 66, 40))
EYE_COLORS = ((60, 40, 20), (40, 70, 160), (40, 130, 70), (110, 110, 120))
HAIR_COLORS = ((30, 28, 26), (95, 60, 30), (210, 180, 90), (150, 50, 30), (160, 160, 165))
N_FACE_SHAPES = 4
N_HAIR_STYLES = 4
N_TATTOO_PATTERNS = 3
N_TATTOO_LOCATIONS = 3

INJURY_KINDS = ("wound", "bruise", "blood")
ACCESSORIES = ("glasses", "hat", "smile")

GLASSES_COLOR = (25, 25, 28)
HAT_COLOR = (60, 60, 140)
TATTOO_COLOR = (50, 40, 120)
MOUTH_COLOR = (122, 60, 58)

_INJURY_PALETTE = {
    "wound": {"core": (148, 24, 28), "rim": (92, 12, 16)},
    "bruise": {"core": (96, 56, 134), "rim": (64, 70, 150)},
    "blood": {"core": (186, 12, 22), "rim": (186, 12, 22)},
}

_BRIGHTNESS = (0.92, 1.0, 1.08)


def subseed(*parts: int) -> int:
    """Stable integer sub-seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class IdentityParams:
    face_shape: int
    skin_tone: int
    eye_spacing: int
    eye_color: int
    hair_style: int
    hair_color: int
    tattoo_pattern: int | None = None
    tattoo_location: int | None = None

    def __post_init__(self):
        checks = (
            (self.face_shape, N_FACE_SHAPES),
            (self.skin_tone, len(SKIN_TONES)),
            (self.eye_spacing, 3),
            (self.eye_color, len(EYE_COLORS)),
            (self.hair_style, N_HAIR_STYLES),
            (self.hair_color, len(HAIR_COLORS)),
        )
        for value, bound in checks:
            if not 0 <= value < bound:
                raise ValueError(f"identity parameter {value} outside [0, {bound})")
        if (self.tattoo_pattern is None) != (self.tattoo_location is None):
            raise ValueError("tattoo pattern and location must be set together")


def identity_params(benchmark_seed: int, index: int) -> IdentityParams:
    rng = np.random.default_rng(np.random.SeedSequence([benchmark_seed, index, 0]))
    has_tattoo = rng.random() < 0.4
    return IdentityParams(
        face_shape=int(rng.integers(0, N_FACE_SHAPES)),
        skin_tone=int(rng.integers(0, len(SKIN_TONES))),
        eye_spacing=int(rng.integers(0, 3)),
        eye_color=int(rng.integers(0, len(EYE_COLORS))),
        hair_style=int(rng.integers(0, N_HAIR_STYLES)),
        hair_color=int(rng.integers(0, len(HAIR_COLORS))),
        tattoo_pattern=int(rng.integers(0, N_TATTOO_PATTERNS)) if has_tattoo else None,
        tattoo_location=int(rng.integers(0, N_TATTOO_LOCATIONS)) if has_tattoo else None,
    )


@dataclass
class SpriteRender:
    image: np.ndarray          # (32, 32, 3) uint8
    face_mask: np.ndarray      # bool, face shape region
    tattoo_mask: np.ndarray    # bool, tattoo pixels (empty if none)


def _face_region(shape_id: int, cy: int, cx: int) -> np.ndarray:
    yy, xx = np.mgrid[0:SPRITE_SIZE, 0:SPRITE_SIZE]
    dy, dx = yy - cy, xx - cx
    if shape_id == 0:
        return (dx / 10.0) ** 2 + (dy / 12.0) ** 2 <= 1.0
    if shape_id == 1:
        return dx**2 + dy**2 <= 11**2
    if shape_id == 2:
        return (np.abs(dx) <= 10) & (np.abs(dy) <= 11) & (np.abs(dx) + np.abs(dy) <= 17)
    return (dx / 8.0) ** 2 + (dy / 12.0) ** 2 <= 1.0


def render_sprite(params: IdentityParams, jitter_seed: int, accessories=()) -> SpriteRender:
    """Render one sprite; identical inputs give bit-identical pixels."""
    accessories = frozenset(accessories)
    unknown = accessories - set(ACCESSORIES)
    if unknown:
        raise ValueError(f"unknown accessories {sorted(unknown)}")
    rng = np.random.default_rng(jitter_seed)
    dy, dx = int(rng.integers(-1, 2)), int(rng.integers(-1, 2))
    brightness = _BRIGHTNESS[int(rng.integers(0, len(_BRIGHTNESS)))]
    cy, cx = 17 + dy, 16 + dx

    img = np.empty((SPRITE_SIZE, SPRITE_SIZE, 3), np.uint8)
    img[:] = BG_COLOR
    yy, xx = np.mgrid[0:SPRITE_SIZE, 0:SPRITE_SIZE]

    face = _face_region(params.face_shape, cy, cx)
    tone = np.array(SKIN_TONES[params.skin_tone], np.uint8)
    img[face] = tone

    # nose
    nose = (xx == cx) & (yy >= cy - 1) & (yy <= cy + 1) & face
    img[nose] = (tone * 0.82).astype(np.uint8)

    # eyes
    ey = cy - 4
    off = 3 + params.eye_spacing
    eye_color = np.array(EYE_COLORS[params.eye_color], np.uint8)
    for ex in (cx - off, cx + off):
        img[ey : ey + 2, ex - 1 : ex + 1] = eye_color

    # mouth
    mouth = (yy == cy + 5) & (np.abs(xx - cx) <= 2)
    if "smile" in accessories:
        mouth |= (yy == cy + 4) & (np.abs(xx - cx) == 3)
    img[mouth & face] = MOUTH_COLOR

    # hair
    hair_color = np.array(HAIR_COLORS[params.hair_color], np.uint8)
    style = params.hair_style
    hair = np.zeros_like(face)
    if style >= 1:
        hair |= face & (yy < cy - 6)
    if style == 2:
        for k in (-6, -3, 0, 3, 6):
            hair |= (np.abs(xx - (cx + k)) < 1) & (yy >= cy - 11) & (yy < cy - 6)
    if style == 3:
        hair |= face & (xx < cx - 6) & (yy < cy + 2)
    img[hair] = hair_color

    # tattoo (identity-critical detail)
    tattoo_mask = np.zeros_like(face)
    if params.tattoo_pattern is not None:
        ty, tx = ((cy + 2, cx - 5), (cy + 2, cx + 5), (cy + 7, cx))[params.tattoo_location]
        offsets = (
            ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)),   # plus
            ((-1, -1), (0, 0), (1, 1)),                     # diagonal
            ((-1, -1), (-1, 1), (1, 0)),                    # triangle of dots
        )[params.tattoo_pattern]
        for oy, ox in offsets:
            if face[ty + oy, tx + ox]:
                tattoo_mask[ty + oy, tx + ox] = True
        img[tattoo_mask] = TATTOO_COLOR

    # accessories drawn last so they sit on top
    if "glasses" in accessories:
        g = np.zeros_like(face)
        for ex in (cx - off, cx + off):
            box = (yy >= ey - 1) & (yy <= ey + 2) & (xx >= ex - 2) & (xx <= ex + 1)
            inner = (yy >= ey) & (yy <= ey + 1) & (xx >= ex - 1) & (xx <= ex)
            g |= box & ~inner
        g |= (yy == ey) & (xx > cx - off + 1) & (xx < cx + off - 2)
        img[g] = GLASSES_COLOR
    if "hat" in accessories:
        band = (yy >= cy - 12) & (yy <= cy - 9) & (np.abs(xx - cx) <= 9)
        brim = (yy == cy - 8) & (np.abs(xx - cx) <= 11)
        img[band | brim] = HAT_COLOR

    # lighting jitter on everything but the background
    nonbg = ~np.all(img == np.array(BG_COLOR, np.uint8), axis=-1)
    scaled = np.clip(np.rint(img[nonbg].astype(np.float64) * brightness), 0, 255).astype(np.uint8)
    img[nonbg] = scaled

    return SpriteRender(image=img, face_mask=face, tattoo_mask=tattoo_mask)


def render_identity(params: IdentityParams, jitter_seed: int, accessories=()) -> np.ndarray:
    return render_sprite(params, jitter_seed, accessories).image


def apply_injury(image: np.ndarray, kind: str, location_seed: int,
                 region: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Overlay an injury inside the face region.

    Returns (injured image, ground-truth mask of exactly the altered pixels).
    When no region mask is given, any non-background pixel counts as face.
    """
    if kind not in INJURY_KINDS:
        raise ValueError(f"unknown injury kind {kind!r}; expected one of {INJURY_KINDS}")
    image = np.asarray(image)
    if region is None:
        region = ~np.all(image == np.array(BG_COLOR, np.uint8), axis=-1)
    rng = np.random.default_rng(location_seed)
    radius = int(rng.integers(3, 5))

    # centers where the whole blob disk stays inside the region
    yy, xx = np.mgrid[0:SPRITE_SIZE, 0:SPRITE_SIZE]
    fits = region.copy()
    for oy in range(-radius, radius + 1):
        for ox in range(-radius, radius + 1):
            if oy * oy + ox * ox <= radius * radius:
                fits &= np.roll(np.roll(region, -oy, axis=0), -ox, axis=1)
    candidates = np.argwhere(fits)
    if candidates.size == 0:
        candidates = np.argwhere(region)
    cy, cx = candidates[int(rng.integers(0, len(candidates)))]

    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    blob = d2 <= (radius - 1) ** 2
    ring = (d2 > (radius - 1) ** 2) & (d2 <= radius**2)
    blob |= ring & (rng.random(region.shape) < 0.6)  # irregular boundary
    blob &= region

    palette = _INJURY_PALETTE[kind]
    injured = image.copy()
    core = d2 <= max(radius - 2, 1) ** 2
    injured[blob] = palette["rim"]
    injured[blob & core] = palette["core"]

    if kind == "blood":
        for _ in range(3):
            sy = cy + int(rng.integers(-radius - 2, radius + 3))
            sx = cx + int(rng.integers(-radius - 2, radius + 3))
            drop = (yy - sy) ** 2 + (xx - sx) ** 2 <= 1
            injured[drop & region] = palette["core"]

    mask = np.any(injured != image, axis=-1)
    return injured, mask


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RefEntry:
    path: str
    jitter_seed: int
    prompt: str


@dataclass
class InjuredEntry:
    path: str
    clean_path: str
    mask_path: str
    kind: str
    prompt: str
    jitter_seed: int
    location_seed: int


@dataclass
class AugEntry:
    path: str
    accessories: list[str]
    prompt: str
    jitter_seed: int


@dataclass
class IdentityRecord:
    id: str
    params: IdentityParams
    refs: list[RefEntry]
    injured: list[InjuredEntry]
    aug: list[AugEntry]
    embedding: list[float] | None = None


@dataclass
class BenchmarkManifest:
    seed: int
    image_size: int
    identities: list[IdentityRecord]

    def to_dict(self) -> dict:
        return {
            "schema": "injuredsprites-manifest-v1",
            "seed": self.seed,
            "image_size": self.image_size,
            "identities": [
                {**asdict(rec), "params": asdict(rec.params)} for rec in self.identities
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkManifest":
        identities = []
        for rec in d["identities"]:
            identities.append(
                IdentityRecord(
                    id=rec["id"],
                    params=IdentityParams(**rec["params"]),
                    refs=[RefEntry(**r) for r in rec["refs"]],
                    injured=[InjuredEntry(**r) for r in rec["injured"]],
                    aug=[AugEntry(**r) for r in rec["aug"]],
                    embedding=rec.get("embedding"),
                )
            )
        return cls(seed=d["seed"], image_size=d["image_size"], identities=identities)

    def save(self, root) -> None:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        (Path(root) / "manifest.json").write_text(text + "\n")

    @classmethod
    def load(cls, root) -> "BenchmarkManifest":
        return cls.from_dict(json.loads((Path(root) / "manifest.json").read_text()))


def save_png(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def load_image_f32(path) -> np.ndarray:
    return load_png(path).astype(np.float32) / 255.0


def mask_to_png(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask, bool).astype(np.uint8)) * 255


def build_benchmark(n_identities: int, refs_per_id: int, injured_per_id: int,
                    seed: int, out_dir, aug_per_id: int = 2) -> BenchmarkManifest:
    """Render the benchmark to disk and return its manifest."""
    if min(n_identities, refs_per_id, injured_per_id) < 1:
        raise ValueError("benchmark counts must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    identities = []
    for idx in range(n_identities):
        params = identity_params(seed, idx)
        ident = f"id{idx:03d}"
        rel = Path("images") / ident

        refs = []
        for j in range(refs_per_id):
            js = subseed(seed, idx, 1, j)
            img = render_identity(params, js)
            path = rel / f"ref{j}.png"
            save_png(root / path, img)
            refs.append(RefEntry(path=str(path), jitter_seed=js, prompt="face"))

        injured = []
        kind_rng = np.random.default_rng(np.random.SeedSequence([seed, idx, 4]))
        for j in range(injured_per_id):
            js = subseed(seed, idx, 2, j)
            ls = subseed(seed, idx, 5, j)
            kind = INJURY_KINDS[int(kind_rng.integers(0, len(INJURY_KINDS)))]
            sprite = render_sprite(params, js)
            inj, mask = apply_injury(sprite.image, kind, ls, region=sprite.face_mask)
            p_inj = rel / f"inj{j}.png"
            p_clean = rel / f"inj{j}_clean.png"
            p_mask = rel / f"inj{j}_mask.png"
            save_png(root / p_inj, inj)
            save_png(root / p_clean, sprite.image)
            save_png(root / p_mask, mask_to_png(mask))
            injured.append(
                InjuredEntry(
                    path=str(p_inj), clean_path=str(p_clean), mask_path=str(p_mask),
                    kind=kind, prompt=f"face,{kind}", jitter_seed=js, location_seed=ls,
                )
            )

        aug = []
        acc_rng = np.random.default_rng(np.random.SeedSequence([seed, idx, 6]))
        for j in range(aug_per_id):
            js = subseed(seed, idx, 3, j)
            acc = sorted(a for a in ACCESSORIES if acc_rng.random() < 0.5)
            img = render_identity(params, js, accessories=acc)
            path = rel / f"aug{j}.png"
            save_png(root / path, img)
            prompt = ",".join(["face"] + acc)
            aug.append(AugEntry(path=str(path), accessories=acc, prompt=prompt, jitter_seed=js))

        identities.append(IdentityRecord(id=ident, params=params, refs=refs, injured=injured, aug=aug))

    manifest = BenchmarkManifest(seed=seed, image_size=SPRITE_SIZE, identities=identities)
    manifest.save(root)
    return manifest


def validate_manifest(manifest_dict: dict) -> None:
    """Validate against the JSON schema shipped with the package."""
    import jsonschema
    from importlib import resources

    schema = json.loads(resources.files("flowid").joinpath("schemas/manifest.schema.json").read_text())
    jsonschema.validate(manifest_dict, schema)
