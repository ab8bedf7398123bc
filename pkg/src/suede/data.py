"""Procedural live / physical-attack / digital-attack face images and protocol splits.

Attack types:

====  ==========  ==============================================
id    family      artefact
====  ==========  ==============================================
0     live        none
1     physical    periodic print grid + reduced dynamic range
2     physical    halftone dot screen + reduced dynamic range
3     digital     hard-edged rectangular splice from another face
4     digital     feathered inner-face swap with tone mismatch
5     digital     local blur (noise-free patch)
6     digital     local checkerboard (upsampling) artefact
====  ==========  ==============================================

Physical artefacts are global and applied before sensor noise. Both physical
types share a recapture cue (fine skin texture and dynamic range are lost)
on top of their own pattern. Digital artefacts are local edits applied after
sensor noise; every edited region is re-synthesised, so it lacks the noise
and texture of its surroundings. The shared cues are what lets a detector
reach a held-out type of a family it has seen.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, ContractError
from .rng import SplitMix64, mix64
from .text import PromptBank

BONAFIDE, ATTACK = 0, 1
PHYSICAL_TYPES = (1, 2)
DIGITAL_TYPES = (3, 4, 5, 6)
ALL_ATTACK_TYPES = PHYSICAL_TYPES + DIGITAL_TYPES
IMAGE_SIZE = 32
NOISE_STD = 0.03
SKIN_TEXTURE = 0.08
PROTOCOLS = ("p1", "p2.1", "p2.2")
DEFAULT_HELD_OUT = {"p1": frozenset(), "p2.1": frozenset({2}), "p2.2": frozenset({6})}
DEFAULT_COUNTS = {"train": 1200, "dev": 300, "test": 600}
_SUBJECT_SALT = 0x5EED_FACE
_GRID = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5


def family_of(attack_type: int) -> str:
    if attack_type == 0:
        return "live"
    if attack_type in PHYSICAL_TYPES:
        return "physical"
    if attack_type in DIGITAL_TYPES:
        return "digital"
    raise ContractError(f"unknown attack type {attack_type}")


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    family: str
    attack_type: int
    subject_id: int
    seed: int

    def record(self) -> dict:
        return {
            "label": "bonafide" if self.label == BONAFIDE else "attack",
            "family": self.family,
            "attack_type": self.attack_type,
            "subject_id": self.subject_id,
            "seed": self.seed,
        }


# -- rendering -----------------------------------------------------------------
def _subject_geometry(subject_id: int) -> dict:
    r = SplitMix64(mix64(subject_id ^ _SUBJECT_SALT))
    u = r.uniform((10,))
    return {
        "cx": 16 + 4 * (u[0] - 0.5),
        "cy": 16 + 4 * (u[1] - 0.5),
        "a": 8.0 + 3.0 * u[2],
        "b": 10.0 + 3.0 * u[3],
        "skin": 0.55 + 0.25 * u[4],
        "eye_dx": 3.5 + 1.5 * u[5],
        "eye_dy": 2.5 + 1.5 * u[6],
        "mouth_w": 2.5 + 2.0 * u[7],
        "bg": 0.15 + 0.25 * u[8],
        "bg_angle": 2 * np.pi * u[9],
    }


def _skin_texture(subject_id: int) -> np.ndarray:
    field = SplitMix64(mix64(subject_id ^ _SUBJECT_SALT)).child("texture").normal((IMAGE_SIZE, IMAGE_SIZE))
    return SKIN_TEXTURE * field


def render_face(subject_id: int, rng: SplitMix64) -> np.ndarray:
    """Noise-free face of ``subject_id`` with pose/lighting jitter drawn from ``rng``."""
    g = _subject_geometry(subject_id)
    j = rng.uniform((4,))
    yy, xx = _GRID
    cx = g["cx"] + 2.0 * (j[0] - 0.5)
    cy = g["cy"] + 2.0 * (j[1] - 0.5)
    light = 0.12 * (j[2] - 0.5)
    gain = 1.0 + 0.1 * (j[3] - 0.5)

    bg = g["bg"] + 0.1 * ((xx - 16) * np.cos(g["bg_angle"]) + (yy - 16) * np.sin(g["bg_angle"])) / 16
    r2 = ((xx - cx) / g["a"]) ** 2 + ((yy - cy) / g["b"]) ** 2
    mask = 1.0 / (1.0 + np.exp(-8.0 * (1.0 - r2)))
    face = g["skin"] * (1.0 - 0.35 * r2) + light * (xx - cx) / g["a"]
    for side in (-1.0, 1.0):
        d2 = (xx - cx - side * g["eye_dx"]) ** 2 + (yy - cy + g["eye_dy"]) ** 2
        face = face - 0.35 * np.exp(-d2 / (2 * 1.2**2))
    mouth = np.exp(-(((xx - cx) / g["mouth_w"]) ** 2) - ((yy - cy - 0.45 * g["b"]) / 0.9) ** 2)
    face = face - 0.3 * mouth
    # fine skin texture; local blur removes it
    face = face + _skin_texture(subject_id)
    return gain * (bg * (1.0 - mask) + face * mask)


def _rect(rng: SplitMix64, lo: int, hi: int, center: float = 16.0, spread: float = 6.0):
    u = rng.uniform((4,))
    h = lo + int(u[0] * (hi - lo + 1))
    w = lo + int(u[1] * (hi - lo + 1))
    y0 = int(np.clip(center - h / 2 + spread * (u[2] - 0.5), 0, IMAGE_SIZE - h))
    x0 = int(np.clip(center - w / 2 + spread * (u[3] - 0.5), 0, IMAGE_SIZE - w))
    return slice(y0, y0 + h), slice(x0, x0 + w)


def _smooth(img: np.ndarray, size: int = 3) -> np.ndarray:
    return uniform_filter(img, size=size, mode="nearest")


def _recapture(img: np.ndarray) -> np.ndarray:
    """Shared physical cue: a print loses fine texture, contrast and black level."""
    return 0.25 + 0.5 * _smooth(img)


def _print_grid(img: np.ndarray, rng: SplitMix64) -> np.ndarray:
    u = rng.uniform((4,))
    period = 3 + int(u[0] * 2)
    py, px = int(u[1] * period), int(u[2] * period)
    amp = 0.06 + 0.04 * u[3]
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    lines = ((yy + py) % period == 0) | ((xx + px) % period == 0)
    return _recapture(img) * (1.0 - amp * lines)


def _halftone(img: np.ndarray, rng: SplitMix64) -> np.ndarray:
    u = rng.uniform((4,))
    period = 2.5 + 1.0 * u[0]
    phy, phx = 2 * np.pi * u[1], 2 * np.pi * u[2]
    amp = 0.06 + 0.04 * u[3]
    yy, xx = _GRID
    dots = np.cos(2 * np.pi * xx / period + phx) * np.cos(2 * np.pi * yy / period + phy)
    return _recapture(img) * (1.0 + amp * dots)


def _partner(subject_id: int, rng: SplitMix64) -> np.ndarray:
    other = subject_id + 1 + int(rng.integers(997))
    face = render_face(other, rng.child("partner-pose"))
    return face + NOISE_STD * rng.child("partner-noise").normal(face.shape)


def _tone_shift(rng: SplitMix64) -> float:
    """Shared digital cue, with smoothing: re-synthesised content is noise-free and off-tone."""
    u = rng.child("tone").uniform((2,))
    return (0.2 + 0.1 * u[0]) * (1.0 if u[1] < 0.5 else -1.0)


def _splice(img, subject_id, rng):
    donor = _partner(subject_id, rng.child("donor"))
    rs, cs = _rect(rng, 10, 16)
    out = img.copy()
    out[rs, cs] = _smooth(donor)[rs, cs] + _tone_shift(rng)
    return out


def _blend_swap(img, subject_id, rng):
    donor = _partner(subject_id, rng.child("donor"))
    g = _subject_geometry(subject_id)
    yy, xx = _GRID
    r2 = ((xx - g["cx"]) / (0.7 * g["a"])) ** 2 + ((yy - g["cy"]) / (0.7 * g["b"])) ** 2
    alpha = 1.0 / (1.0 + np.exp(-6.0 * (1.0 - r2)))
    return (1 - alpha) * img + alpha * (_smooth(donor) + _tone_shift(rng))


def _local_blur(img, subject_id, rng):
    rs, cs = _rect(rng, 16, 22)
    out = img.copy()
    smooth = _smooth(_smooth(img, 5), 5)
    out[rs, cs] = smooth[rs, cs] + _tone_shift(rng)
    return out


def _checker(img, subject_id, rng):
    rs, cs = _rect(rng, 10, 16)
    amp = 0.04 + 0.03 * rng.uniform((1,))[0]
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    pattern = np.where((yy + xx) % 2 == 0, amp, -amp)
    out = img.copy()
    out[rs, cs] = _smooth(img)[rs, cs] + _tone_shift(rng) + pattern[rs, cs]
    return out


_PHYSICAL = {1: _print_grid, 2: _halftone}
_DIGITAL = {3: _splice, 4: _blend_swap, 5: _local_blur, 6: _checker}


def generate_sample(family: str, attack_type: int, subject_id: int, seed: int) -> LabeledSample:
    """Render one sample; a pure function of its arguments."""
    if family_of(attack_type) != family:
        raise ContractError(f"attack type {attack_type} does not belong to family {family!r}")
    rng = SplitMix64(seed)
    img = render_face(subject_id, rng.child("pose"))
    noise = NOISE_STD * rng.child("noise").normal(img.shape)
    art = rng.child("artefact")
    if attack_type in _PHYSICAL:
        img = _PHYSICAL[attack_type](img, art) + noise
    else:
        img = img + noise
        if attack_type in _DIGITAL:
            img = _DIGITAL[attack_type](img, subject_id, art)
    img = np.clip(img, 0.0, 1.0)[None]
    label = BONAFIDE if attack_type == 0 else ATTACK
    return LabeledSample(img, label, family, attack_type, int(subject_id), int(seed))


# -- protocols -------------------------------------------------------------------
@dataclass
class ProtocolSplit:
    name: str
    train: list[LabeledSample]
    dev: list[LabeledSample]
    test: list[LabeledSample]
    held_out_types: frozenset = field(default_factory=frozenset)

    def split(self, which: str) -> list[LabeledSample]:
        if which not in ("train", "dev", "test"):
            raise ContractError(f"unknown split {which!r}")
        return getattr(self, which)


def _normalize_name(name: str) -> str:
    key = name.lower().replace("protocol", "").strip()
    key = key if key.startswith("p") else f"p{key}"
    if key not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {name!r}; expected one of {PROTOCOLS}")
    return key


def _build_split(types: Sequence[int], n: int, subjects: np.ndarray, rng: SplitMix64, bona_frac: float):
    n_bona = int(round(n * bona_frac))
    n_att = n - n_bona
    if n_bona < 1 or n_att < 1:
        raise ConfigError(f"split of {n} samples cannot hold both classes")
    kinds = [0] * n_bona + [types[i % len(types)] for i in range(n_att)]
    subj = subjects[rng.integers(len(subjects), (n,))]
    seeds = rng.next_u64(n)
    samples = [
        generate_sample(family_of(t), t, int(s), int(sd)) for t, s, sd in zip(kinds, subj, seeds)
    ]
    order = rng.permutation(n)
    return [samples[i] for i in order]


def build_protocol(
    name: str,
    counts: dict[str, int] | None = None,
    held_out: Sequence[int] | None = None,
    master_seed: int = 0,
    bona_frac: float = 0.5,
    samples_per_subject: int = 6,
) -> ProtocolSplit:
    """Build a protocol split.

    ``p1`` uses every attack type everywhere. ``p2.1`` / ``p2.2`` keep the
    ``held_out`` types (default: type 2 / type 6) out of train and dev; their
    test split contains only bonafide plus held-out attacks. Subject ids are
    disjoint across train/dev/test.
    """
    key = _normalize_name(name)
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    for split, n in counts.items():
        if n < 2:
            raise ConfigError(f"{split} needs at least 2 samples, got {n}")
    held = frozenset(DEFAULT_HELD_OUT[key] if held_out is None else held_out)
    if key == "p1" and held:
        raise ConfigError("protocol p1 holds out no attack types")
    if key == "p2.1" and not held <= set(PHYSICAL_TYPES):
        raise ConfigError(f"p2.1 must hold out physical types only, got {sorted(held)}")
    if key == "p2.2" and not held <= set(DIGITAL_TYPES):
        raise ConfigError(f"p2.2 must hold out digital types only, got {sorted(held)}")
    if key != "p1" and not held:
        raise ConfigError(f"{key} needs at least one held-out attack type")
    seen = [t for t in ALL_ATTACK_TYPES if t not in held]
    if not seen:
        raise ConfigError("type partition leaves the training split without attacks")
    test_types = sorted(held) if held else list(ALL_ATTACK_TYPES)

    rng = SplitMix64(master_seed).child("protocol", key)
    out = {}
    start = 0
    for split, types in (("train", seen), ("dev", seen), ("test", test_types)):
        n_subj = max(2, counts[split] // samples_per_subject)
        subjects = np.arange(start, start + n_subj)
        start += n_subj
        out[split] = _build_split(types, counts[split], subjects, rng.child(split), bona_frac)
    return ProtocolSplit(key, out["train"], out["dev"], out["test"], held)


def stack(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """Images ``[N,1,H,W]`` and integer labels."""
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


def prompt_for(sample: LabeledSample, bank: PromptBank) -> str:
    """Text paired with a sample for contrastive training.

    Bonafide gets a real prompt; an attack gets a family-specific prompt when
    the bank has one, otherwise any fake prompt. The choice among candidates
    is keyed on the sample seed.
    """
    if sample.label == BONAFIDE:
        pool = bank.real
    else:
        pool = bank.fake_by_family.get(sample.family) or bank.fake_all()
    if not pool:
        raise ConfigError(f"prompt bank has no prompt for a {sample.family} sample")
    return pool[sample.seed % len(pool)]


# -- export ----------------------------------------------------------------------
IMAGE_MAGIC = b"SUEIMG01"


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<3I", c, h, w))
        fh.write(image.astype("<f4").tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != IMAGE_MAGIC:
        raise ContractError(f"{path}: not an image file")
    c, h, w = struct.unpack("<3I", raw[8:20])
    return np.frombuffer(raw[20:], dtype="<f4").reshape(c, h, w).astype(np.float64)


def export_split(split: ProtocolSplit, out_dir) -> Path:
    """One binary image file per sample plus ``manifest.jsonl`` per split."""
    out_dir = Path(out_dir)
    for which in ("train", "dev", "test"):
        sub = out_dir / which
        sub.mkdir(parents=True, exist_ok=True)
        with open(sub / "manifest.jsonl", "w") as fh:
            for i, s in enumerate(split.split(which)):
                rel = f"{which}/{i:05d}.img"
                write_image(out_dir / rel, s.image)
                fh.write(json.dumps({"path": rel, **s.record()}) + "\n")
    meta = {"protocol": split.name, "held_out_types": sorted(split.held_out_types)}
    (out_dir / "protocol.json").write_text(json.dumps(meta) + "\n")
    return out_dir
