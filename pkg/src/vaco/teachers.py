"""Frozen synthetic stand-ins for the vision encoder and the task teachers.

Everything here is a deterministic numpy function of a seed. The encoder is a
frozen per-patch random projection; each teacher resamples the image onto its
own token grid and applies a frozen random patch projection, ``tanh`` and a
frozen channel mixing. Dataset answers are computed from one teacher's
features (which quadrant has the largest mean activation), so labels are
exactly recomputable from teacher outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vaco import numerics as nx
from vaco.decoder import init_linear, linear
from vaco.numerics import ParamSet, Tensor

# vocabulary layout of the toy text side
PAD, BOS, EOS = 0, 1, 2
ANSWER_BASE = 3  # tokens 3..6 name quadrants 0..3
PROMPT_BASE = 7
NUM_QUADRANTS = 4
PROMPT_TEMPLATES = (
    (BOS, 7, 8, 9),
    (BOS, 10, 8, 9),
    (BOS, 7, 11, 12),
    (BOS, 13, 14, 9),
)
ANSWER_LEN = 2


@dataclass(frozen=True)
class ImageConfig:
    height: int = 8
    width: int = 8
    channels: int = 3
    patch: int = 2
    encoder_dim: int = 32

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("image size must be a multiple of the patch size")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class TeacherSpec:
    name: str
    tokens: int  # M_t, a square number with an even side
    dim: int  # D_t
    seed: int
    hidden: int = 32
    gain: float = 3.0
    patch: int = 2
    coherence: float = 0.0  # weight of a mixing column shared by all output dims
    bias_scale: float = 1.0

    def __post_init__(self):
        side = math.isqrt(self.tokens)
        if side * side != self.tokens or side % 2:
            raise ValueError(f"teacher {self.name!r}: tokens must be a square with an even side, got {self.tokens}")
        if self.dim < 1 or self.hidden < 1:
            raise ValueError(f"teacher {self.name!r}: dim and hidden must be >= 1")

    @property
    def side(self) -> int:
        return math.isqrt(self.tokens)


@dataclass
class _TeacherWeights:
    proj: np.ndarray
    bias: np.ndarray
    mix: np.ndarray


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """``H x W x C`` to ``(H/p * W/p) x (p*p*C)``, row-major over patches."""
    h, w, c = image.shape
    x = image.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // patch) * (w // patch), patch * patch * c)


def _resample(image: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = image.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return image[rows][:, cols]


class SyntheticWorld:
    """Frozen encoder plus a set of teachers, all derived from ``seed``."""

    def __init__(self, image: ImageConfig, teachers: Sequence[TeacherSpec], seed: int = 0, encoder_bias: bool = False):
        names = [t.name for t in teachers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate teacher names {names}")
        self.image = image
        self.seed = seed
        self.specs = {t.name: t for t in teachers}
        rng = np.random.default_rng([seed, 0])
        self.encoder_w = rng.normal(0.0, 1.0 / math.sqrt(image.patch_dim), (image.patch_dim, image.encoder_dim))
        self.encoder_b = rng.normal(0.0, 0.1, image.encoder_dim) if encoder_bias else np.zeros(image.encoder_dim)
        self._weights = {t.name: self._teacher_weights(t) for t in teachers}

    def _teacher_weights(self, spec: TeacherSpec) -> _TeacherWeights:
        rng = np.random.default_rng([self.seed, 1, spec.seed])
        pdim = spec.patch * spec.patch * self.image.channels
        proj = rng.normal(0.0, spec.gain / math.sqrt(pdim), (pdim, spec.hidden))
        bias = rng.normal(0.0, spec.bias_scale, spec.hidden)
        mix = rng.normal(0.0, 1.0 / math.sqrt(spec.hidden), (spec.hidden, spec.dim))
        shared = rng.normal(0.0, 1.0 / math.sqrt(spec.hidden), (spec.hidden, 1))
        mix = (1.0 - spec.coherence) * mix + spec.coherence * shared
        return _TeacherWeights(proj, bias, mix)

    @property
    def task_names(self) -> list[str]:
        return list(self.specs)

    def _check(self, image: np.ndarray) -> None:
        cfg = self.image
        if image.shape[-3:] != (cfg.height, cfg.width, cfg.channels):
            raise ValueError(f"image shape {image.shape[-3:]} != {(cfg.height, cfg.width, cfg.channels)}")

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """Per-patch frozen projection, ``K x d_v`` (or batched)."""
        self._check(image)
        if image.ndim == 4:
            return np.stack([self.encode_image(im) for im in image])
        return patchify(image, self.image.patch) @ self.encoder_w + self.encoder_b

    def teacher_features(self, name: str, image: np.ndarray) -> np.ndarray:
        """``M_t x D_t`` features of task ``name`` (or batched)."""
        if name not in self.specs:
            raise KeyError(f"unknown task {name!r}; known: {self.task_names}")
        self._check(image)
        if image.ndim == 4:
            return np.stack([self.teacher_features(name, im) for im in image])
        spec, w = self.specs[name], self._weights[name]
        grid = _resample(2.0 * image - 1.0, spec.side * spec.patch)
        return np.tanh(patchify(grid, spec.patch) @ w.proj + w.bias) @ w.mix

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.encoder_w, self.encoder_b):
            h.update(np.ascontiguousarray(arr).tobytes())
        for name in sorted(self._weights):
            w = self._weights[name]
            for arr in (w.proj, w.bias, w.mix):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def quadrant_scores(features: np.ndarray) -> np.ndarray:
    """Mean activation of the teacher tokens in each image quadrant.

    ``features`` is ``M x D`` over a square token grid; returns 4 scores
    ordered top-left, top-right, bottom-left, bottom-right.
    """
    side = math.isqrt(features.shape[-2])
    act = features.mean(axis=-1).reshape(features.shape[:-2] + (side, side))
    h = side // 2
    return np.stack(
        [act[..., :h, :h].mean(axis=(-1, -2)), act[..., :h, h:].mean(axis=(-1, -2)),
         act[..., h:, :h].mean(axis=(-1, -2)), act[..., h:, h:].mean(axis=(-1, -2))],
        axis=-1,
    )


def quadrant_label(features: np.ndarray) -> np.ndarray:
    return np.argmax(quadrant_scores(features), axis=-1)


def quadrant_of_patch(image: ImageConfig) -> np.ndarray:
    """Quadrant index (0..3) of every encoder patch."""
    gh, gw = image.grid
    r, c = np.divmod(np.arange(gh * gw), gw)
    return (r >= gh // 2).astype(int) * 2 + (c >= gw // 2).astype(int)


# ---------------------------------------------------------------- projector


def init_projector(params: ParamSet, encoder_dim: int, d_model: int, rng: np.random.Generator, name: str = "projector") -> None:
    init_linear(params, name, encoder_dim, d_model, rng)


def project(features, params: ParamSet, name: str = "projector") -> Tensor:
    features = nx.as_tensor(features)
    w = params[f"{name}.w"]
    if features.shape[-1] != w.shape[0]:
        raise ValueError(f"feature width {features.shape[-1]} != projector input {w.shape[0]}")
    return linear(params, name, features)


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C
    prompts: np.ndarray  # N x P
    answers: np.ndarray  # N x A
    labels: np.ndarray  # N
    task_link: str
    seed: int
    split: str
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def text(self) -> np.ndarray:
        return np.concatenate([self.prompts, self.answers], axis=1)

    def targets(self) -> np.ndarray:
        """Next-token targets over the text block, ``-1`` where unsupervised."""
        n, p = self.prompts.shape
        a = self.answers.shape[1]
        out = np.full((n, p + a), -1, dtype=np.int64)
        out[:, p - 1 : p - 1 + a] = self.answers
        return out

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.prompts[idx], self.answers[idx], self.labels[idx],
                       self.task_link, self.seed, self.split, dict(self.meta))


def generate_dataset(world: SyntheticWorld, seed: int, count: int, task_link: str, split: str = "train") -> Dataset:
    """Random images whose answer token names the teacher's argmax quadrant."""
    if task_link not in world.specs:
        raise KeyError(f"unknown task {task_link!r}; known: {world.task_names}")
    stream = {"train": 0, "heldout": 1}[split]
    rng = np.random.default_rng([seed, 2, stream])
    cfg = world.image
    images = rng.random((count, cfg.height, cfg.width, cfg.channels))
    templates = np.array(PROMPT_TEMPLATES)
    prompts = templates[rng.integers(0, len(templates), count)]
    labels = quadrant_label(world.teacher_features(task_link, images))
    answers = np.stack([ANSWER_BASE + labels, np.full(count, EOS)], axis=1)
    meta = {"seed": seed, "count": count, "task_link": task_link, "split": split,
            "world_seed": world.seed, "world": world.fingerprint()}
    return Dataset(images, prompts.astype(np.int64), answers.astype(np.int64), labels, task_link, seed, split, meta)


def image_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype="<f8").tobytes()).hexdigest()


def dataset_lines(data: Dataset) -> str:
    rows = [
        f"{image_hash(im)}\t{' '.join(map(str, p))}\t{' '.join(map(str, a))}"
        for im, p, a in zip(data.images, data.prompts, data.answers)
    ]
    return "\n".join(rows) + "\n"


def write_dataset(data: Dataset, path: Path) -> None:
    """One record per line plus a ``.meta.json`` sidecar with the seed/config."""
    path = Path(path)
    path.write_text(dataset_lines(data))
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(data.meta, sort_keys=True, indent=2) + "\n")


def default_teachers() -> list[TeacherSpec]:
    return [
        TeacherSpec("depth", 16, 24, seed=11),
        TeacherSpec("semantic", 36, 16, seed=12),
        TeacherSpec("dino", 16, 32, seed=13),
        TeacherSpec("geometry", 64, 20, seed=14),
    ]


def teacher_spec_dict(spec: TeacherSpec) -> dict:
    return asdict(spec)
