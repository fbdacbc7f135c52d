"""Multi-domain image corpora, leave-one-domain-out splits and batch sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class DomainSample:
    image: np.ndarray  # H x W x 3, float in [0, 1]
    label: str
    domain: str


@dataclass(frozen=True)
class DomainSuite:
    name: str
    domains: tuple[str, ...]
    samples: tuple[DomainSample, ...]
    label_sets: Mapping[str, frozenset[str]]

    def __post_init__(self):
        if len(self.domains) < 2:
            raise DataError(f"suite {self.name!r} needs at least 2 domains, got {len(self.domains)}")
        for s in self.samples:
            if s.domain not in self.domains:
                raise DataError(f"sample domain {s.domain!r} not in suite domains")
            if s.label not in self.label_sets[s.domain]:
                raise DataError(f"label {s.label!r} not in label set of domain {s.domain!r}")

    @property
    def classes(self) -> list[str]:
        """Lexicographically ordered union of all labels."""
        return sorted(set().union(*self.label_sets.values()))

    def of_domain(self, domain: str) -> list[DomainSample]:
        return [s for s in self.samples if s.domain == domain]

    def manifest(self) -> dict:
        counts: dict[str, dict[str, int]] = {d: {} for d in self.domains}
        for s in self.samples:
            counts[s.domain][s.label] = counts[s.domain].get(s.label, 0) + 1
        return {
            "name": self.name,
            "domains": list(self.domains),
            "classes": self.classes,
            "counts": {d: dict(sorted(c.items())) for d, c in counts.items()},
        }


@dataclass(frozen=True)
class SplitSpec:
    sources: tuple[str, ...]
    target: str
    known_labels: tuple[str, ...]
    target_open_labels: frozenset[str]
    # per-source label restriction actually used for training
    source_labels: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.target in self.sources:
            raise DataError("target domain must not be a source domain")
        if UNKNOWN in self.known_labels:
            raise DataError(f"{UNKNOWN!r} is reserved and cannot be a known class")

    @property
    def augmented_labels(self) -> tuple[str, ...]:
        return self.known_labels + (UNKNOWN,)

    @property
    def unknown_index(self) -> int:
        return len(self.known_labels)

    def label_index(self, label: str) -> int:
        return self.augmented_labels.index(label)


@dataclass(frozen=True)
class OpenSample:
    image: np.ndarray
    domain: str  # pseudo-domain the image was styled after


@dataclass
class TrainBatch:
    real: list[tuple[DomainSample, int]]
    open: list[tuple[np.ndarray, int, str]]

    def __len__(self):
        return len(self.real) + len(self.open)

    def images(self) -> np.ndarray:
        imgs = [s.image for s, _ in self.real] + [im for im, _, _ in self.open]
        return np.stack(imgs)

    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.real] + [y for _, y, _ in self.open], dtype=np.int64)

    def domains(self) -> list[str]:
        return [s.domain for s, _ in self.real] + [d for _, _, d in self.open]


# -- loading -----------------------------------------------------------------


def load_image(path: Path, size: int | None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_suite(root: str | Path, image_size: int | None = 224, name: str | None = None) -> DomainSuite:
    """Read a ``{root}/{domain}/{class}/*.png|jpg`` tree into a suite.

    Domains and classes come from directory names in lexicographic order.
    Undecodable files are skipped with a warning; a domain with no usable
    image is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DataError(f"no domains found under {root}")

    samples: list[DomainSample] = []
    label_sets: dict[str, frozenset[str]] = {}
    for ddir in domain_dirs:
        labels = set()
        for cdir in sorted(p for p in ddir.iterdir() if p.is_dir()):
            for f in sorted(cdir.iterdir()):
                if f.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                try:
                    img = load_image(f, image_size)
                except Exception as exc:  # PIL raises a zoo of error types
                    logger.warning("skipping undecodable image %s: %s", f, exc)
                    continue
                samples.append(DomainSample(img, cdir.name, ddir.name))
                labels.add(cdir.name)
        if not labels:
            raise DataError(f"domain {ddir.name!r} has no decodable images")
        label_sets[ddir.name] = frozenset(labels)
    return DomainSuite(name or root.name, tuple(d.name for d in domain_dirs), tuple(samples), label_sets)


def write_suite(suite: DomainSuite, root: str | Path) -> Path:
    """Emit a suite as a directory tree plus ``manifest.json``."""
    root = Path(root)
    counters: dict[tuple[str, str], int] = {}
    for s in suite.samples:
        key = (s.domain, s.label)
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        out = root / s.domain / s.label
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(s.image)).save(out / f"{idx:05d}.png")
    with open(root / "manifest.json", "w") as f:
        json.dump(suite.manifest(), f, indent=2, sort_keys=True)
    return root


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


# -- splits ------------------------------------------------------------------


def _resolve_class_split(
    class_split: Mapping[str, Sequence[int]] | None,
    classes: list[str],
    sources: list[str],
    target: str,
    suite: DomainSuite,
) -> tuple[dict[str, frozenset[str]], frozenset[str]]:
    def names(idx: Sequence[int]) -> frozenset[str]:
        out = set()
        for i in idx:
            if isinstance(i, str):
                if i not in classes:
                    raise DataError(f"class split references unknown class {i!r}")
                out.add(i)
                continue
            if not 0 <= int(i) < len(classes):
                raise DataError(f"class split references unknown class index {i}")
            out.add(classes[int(i)])
        return frozenset(out)

    src = {d: suite.label_sets[d] for d in sources}
    tgt = suite.label_sets[target]
    if not class_split:
        return src, tgt
    for key in class_split:
        if key not in suite.domains and key != "target" and not key.startswith("source"):
            raise DataError(f"class split key {key!r} is neither a domain nor a role")
    for pos, d in enumerate(sources, start=1):
        # a domain-name key wins over the positional role key
        spec = class_split.get(d, class_split.get(f"source{pos}"))
        if spec is not None:
            src[d] = names(spec) & suite.label_sets[d]
    if "target" in class_split:
        tgt = names(class_split["target"]) & suite.label_sets[target]
    return src, tgt


def make_lodo_splits(
    suite: DomainSuite, class_split: Mapping[str, Sequence[int]] | None = None
) -> list[SplitSpec]:
    """One split per held-out domain.

    ``class_split`` maps either domain names or positional roles
    (``source1``, ``source2``, ..., ``target``) to lists of class indices into
    the suite's lexicographic class list (class names are accepted too).
    """
    if len(suite.domains) < 2:
        raise DataError("leave-one-domain-out needs at least 2 domains")
    classes = suite.classes
    splits = []
    for target in suite.domains:
        sources = [d for d in suite.domains if d != target]
        src_labels, tgt_labels = _resolve_class_split(class_split, classes, sources, target, suite)
        known = tuple(sorted(set().union(*src_labels.values())))
        splits.append(
            SplitSpec(
                sources=tuple(sources),
                target=target,
                known_labels=known,
                target_open_labels=frozenset(tgt_labels - set(known)),
                source_labels=src_labels,
            )
        )
    return splits


def load_class_split(path: str | Path) -> dict[str, list[int]]:
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigurationError(f"class split file {path} must hold a JSON object")
    return data


def source_pool(suite: DomainSuite, split: SplitSpec) -> list[DomainSample]:
    """Training samples of ``split``: source domains restricted to their class subsets."""
    pool = []
    for s in suite.samples:
        if s.domain in split.sources and s.label in split.source_labels.get(s.domain, split.known_labels):
            pool.append(s)
    return pool


def target_pool(suite: DomainSuite, split: SplitSpec) -> list[DomainSample]:
    keep = set(split.known_labels) | split.target_open_labels
    return [s for s in suite.samples if s.domain == split.target and s.label in keep]


# -- toy suite ---------------------------------------------------------------

TOY_DOMAINS = ("art", "cartoon", "photo", "sketch", "clipart", "painting")
TOY_CLASSES = ("checker", "diagonal", "dots", "hstripes", "rings", "vstripes", "cross", "waves")


def toy_pattern(name: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """Grayscale class-defining structure in [0, 1] for a toy class."""
    v, u = np.mgrid[0:size, 0:size] / size
    f = rng.uniform(3.0, 5.0)
    ph = rng.uniform(0, 2 * np.pi)
    if name == "hstripes":
        s = np.sin(2 * np.pi * f * v + ph)
    elif name == "vstripes":
        s = np.sin(2 * np.pi * f * u + ph)
    elif name == "diagonal":
        s = np.sin(2 * np.pi * f * (u + v) / np.sqrt(2) + ph)
    elif name == "checker":
        s = np.tanh(3 * np.sin(2 * np.pi * f * u + ph) * np.sin(2 * np.pi * f * v + ph))
    elif name == "rings":
        cu, cv = rng.uniform(0.3, 0.7, size=2)
        s = np.sin(2 * np.pi * 1.5 * f * np.hypot(u - cu, v - cv) + ph)
    elif name == "dots":
        s = np.cos(2 * np.pi * f * u + ph) * np.cos(2 * np.pi * f * v + ph)
        s = 2 * np.exp(-4 * (1 - s)) - 1
    elif name == "cross":
        s = np.maximum(np.cos(2 * np.pi * f * u + ph), np.cos(2 * np.pi * f * v + ph)) ** 3
    elif name == "waves":
        s = np.sin(2 * np.pi * f * v + 1.5 * np.sin(2 * np.pi * 2 * u) + ph)
    else:
        raise DataError(f"no toy pattern named {name!r}")
    return 0.5 + 0.5 * s


def toy_style(domain_index: int) -> dict[str, np.ndarray]:
    """Palette and texture parameters of a toy domain (fixed per index)."""
    rng = np.random.default_rng(1000 + domain_index)
    lo = rng.uniform(0.0, 0.45, size=3)
    hi = rng.uniform(0.55, 1.0, size=3)
    if domain_index % 2:
        lo, hi = hi, lo  # inverted palette
    gamma = rng.uniform(0.6, 1.6, size=3)
    return {
        "lo": lo,
        "hi": hi,
        "gamma": gamma,
        "tex_freq": rng.uniform(8.0, 14.0, size=2),
        "tex_amp": np.array(rng.uniform(0.04, 0.1)),
    }


def apply_style(gray: np.ndarray, style: Mapping[str, np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Pointwise palette map (monotone per channel) plus additive texture."""
    size = gray.shape[0]
    g = np.clip(gray, 0.0, 1.0)[..., None] ** style["gamma"]
    img = style["lo"] + g * (style["hi"] - style["lo"])
    v, u = np.mgrid[0:size, 0:size] / size
    fu, fv = style["tex_freq"]
    tex = np.sin(2 * np.pi * fu * u + rng.uniform(0, 2 * np.pi)) * np.sin(2 * np.pi * fv * v)
    img = img + style["tex_amp"] * tex[..., None]
    return np.clip(img, 0.0, 1.0)


def synth_toy_suite(
    seed: int, n_domains: int = 3, n_classes: int = 6, n_per_cell: int = 20, image_size: int = 32
) -> DomainSuite:
    """Deterministic procedural multi-domain suite.

    Class picks the spatial pattern; domain picks palette and texture.
    """
    if n_domains < 2 or n_domains > len(TOY_DOMAINS):
        raise ValueError(f"n_domains must be in [2, {len(TOY_DOMAINS)}]")
    if n_classes < 3 or n_classes > len(TOY_CLASSES):
        raise ValueError(f"n_classes must be in [3, {len(TOY_CLASSES)}]")
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    if n_per_cell < 1:
        raise ValueError("n_per_cell must be >= 1")
    domains = TOY_DOMAINS[:n_domains]
    classes = sorted(TOY_CLASSES[:n_classes])
    rng = np.random.default_rng(seed)
    samples = []
    for di, d in enumerate(domains):
        style = toy_style(di)
        for c in classes:
            for _ in range(n_per_cell):
                img = apply_style(toy_pattern(c, rng, image_size), style, rng)
                samples.append(DomainSample(img, c, d))
    label_sets = {d: frozenset(classes) for d in domains}
    return DomainSuite(f"toy-{seed}", tuple(domains), tuple(samples), label_sets)


# -- batches -----------------------------------------------------------------


def open_quota(batch_size: int, open_fraction: float) -> int:
    # half-up rounding; Python's round() would send 2.5 to 2
    return int(math.floor(open_fraction * batch_size + 0.5))


def sample_batch(
    split: SplitSpec,
    real_pool: Sequence[DomainSample],
    open_pool: Sequence[OpenSample],
    batch_size: int,
    open_fraction: float,
    rng: np.random.Generator,
) -> TrainBatch:
    """Draw a batch with ``round(open_fraction * batch_size)`` pseudo-open images.

    Real samples are drawn as same-class cross-domain pairs when some class
    is present in two or more source domains; otherwise uniformly.
    """
    if batch_size < 4:
        raise ValueError("batch_size must be >= 4")
    if not real_pool:
        raise DataError("empty real pool")
    n_open = open_quota(batch_size, open_fraction)
    if n_open and not open_pool:
        raise DataError("open pool is empty but open_fraction > 0")
    n_real = batch_size - n_open
    known = set(split.known_labels)

    by_class: dict[str, dict[str, list[int]]] = {}
    for i, s in enumerate(real_pool):
        if s.label not in known:
            continue
        by_class.setdefault(s.label, {}).setdefault(s.domain, []).append(i)
    if not by_class:
        raise DataError("real pool holds no sample with a known label")
    pairable = sorted(c for c, doms in by_class.items() if len(doms) >= 2)
    eligible = [i for doms in by_class.values() for idx in doms.values() for i in idx]

    picks: list[int] = []
    while pairable and n_real - len(picks) >= 2:
        c = pairable[rng.integers(len(pairable))]
        doms = sorted(by_class[c])
        d1, d2 = rng.choice(len(doms), size=2, replace=False)
        for d in (doms[d1], doms[d2]):
            idx = by_class[c][d]
            picks.append(idx[rng.integers(len(idx))])
    while len(picks) < n_real:
        picks.append(eligible[rng.integers(len(eligible))])

    real = [(real_pool[i], split.label_index(real_pool[i].label)) for i in picks]
    opened = []
    for j in rng.integers(len(open_pool), size=n_open) if n_open else []:
        o = open_pool[int(j)]
        opened.append((o.image, split.unknown_index, o.domain))
    return TrainBatch(real, opened)


def steps_per_epoch(n_real: int, batch_size: int, open_fraction: float) -> int:
    per_batch = batch_size - open_quota(batch_size, open_fraction)
    return max(1, math.ceil(n_real / max(per_batch, 1)))
