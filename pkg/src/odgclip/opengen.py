"""Pseudo-open pool synthesis: prompts, generators, entropy filtering, disk cache."""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .datasets import TOY_CLASSES, TOY_DOMAINS, OpenSample, apply_style, to_uint8, toy_pattern, toy_style
from .errors import DataError, OpenGenUnavailable

logger = logging.getLogger(__name__)

PP_TEMPLATE = "a {domain} of an unknown class"
DEFAULT_THRESHOLD = 0.2
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class GenRequest:
    positive: str
    negatives: tuple[str, ...]
    count: int
    seed: int
    domain: str

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")

    def prompt_hash(self) -> str:
        blob = json.dumps([self.positive, list(self.negatives)]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class GeneratorBackend(Protocol):
    def generate(self, request: GenRequest) -> list[np.ndarray]: ...


def build_prompts(domain_name: str, known_classes: Sequence[str], pp_only: bool = False,
                  template: str = PP_TEMPLATE) -> tuple[str, list[str]]:
    """Positive prompt for ``domain_name`` and the known class names as negatives."""
    if not domain_name or not domain_name.strip():
        raise DataError("empty domain name")
    if not known_classes:
        raise DataError("known class list is empty")
    positive = template.format(domain=domain_name)
    return positive, ([] if pp_only else list(known_classes))


def grayscale_entropy(image: np.ndarray) -> float:
    """Shannon entropy of the 8-bit luminance histogram, in bits / 8."""
    img = np.asarray(image, dtype=np.float64)
    gray = img @ LUMA if img.ndim == 3 else img
    levels = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.int64)
    p = np.bincount(levels.ravel(), minlength=256) / levels.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum() / 8.0)


@dataclass
class OpenPool:
    samples: list[OpenSample]
    entropies: list[float]
    threshold: float
    # every candidate seen before filtering: (domain, entropy, accepted)
    candidates: list[tuple[str, float, bool]] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def acceptance_rate(self) -> float:
        if not self.candidates:
            return 0.0
        return sum(a for _, _, a in self.candidates) / len(self.candidates)


def filter_pool(images: Sequence[np.ndarray], threshold: float = DEFAULT_THRESHOLD,
                domains: Sequence[str] | None = None) -> OpenPool:
    """Keep images whose normalized grayscale entropy exceeds ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    domains = list(domains) if domains is not None else [""] * len(images)
    kept, ents, cands = [], [], []
    for img, dom in zip(images, domains):
        e = grayscale_entropy(img)
        ok = e > threshold
        cands.append((dom, e, ok))
        if ok:
            kept.append(OpenSample(np.asarray(img), dom))
            ents.append(e)
    if not kept:
        logger.warning("entropy filter at %.3f rejected all %d images", threshold, len(cands))
    return OpenPool(kept, ents, threshold, cands)


# -- stub generator ------------------------------------------------------------


def _domain_style(domain: str) -> dict:
    if domain in TOY_DOMAINS:
        return toy_style(TOY_DOMAINS.index(domain))
    digest = hashlib.sha256(domain.encode()).digest()
    return toy_style(100 + int.from_bytes(digest[:2], "little"))


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave value noise, bilinearly upsampled from coarse random grids."""
    out = np.zeros((size, size))
    for k, cells in enumerate((3, 5, 9)):
        coarse = rng.standard_normal((cells, cells))
        img = Image.fromarray(coarse.astype(np.float32)).resize((size, size), Image.BILINEAR)
        out += np.asarray(img, dtype=np.float64) / (k + 1)
    return out


def _blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(rng.integers(2, 6)):
        cu, cv = rng.uniform(0, 1, size=2)
        su, sv = rng.uniform(0.05, 0.25, size=2)
        out += rng.uniform(-1.5, 1.5) * np.exp(-((u - cu) ** 2 / (2 * su**2) + (v - cv) ** 2 / (2 * sv**2)))
    return out


class StubGenerator:
    """Deterministic procedural stand-in for a text-to-image model.

    Images are smooth multi-frequency noise plus random blobs, passed through
    the palette of the requested domain. Without negative prompts half of the
    images also carry one of the toy suite's class patterns, mimicking the
    semantic leakage of positive-only prompting.
    """

    def __init__(self, seed: int = 0, image_size: int = 32):
        self.seed = seed
        self.image_size = image_size

    def generate(self, request: GenRequest) -> list[np.ndarray]:
        key = f"{self.seed}|{request.seed}|{request.domain}|{request.prompt_hash()}"
        rng = np.random.default_rng(int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little"))
        style = _domain_style(request.domain)
        size = self.image_size
        out = []
        for _ in range(request.count):
            field_ = _smooth_noise(rng, size) + _blobs(rng, size)
            lo, hi = np.percentile(field_, [2, 98])
            gray = np.clip((field_ - lo) / max(hi - lo, 1e-9), 0, 1)
            if not request.negatives and rng.random() < 0.5:
                cls = TOY_CLASSES[rng.integers(len(TOY_CLASSES))]
                gray = 0.35 * gray + 0.65 * toy_pattern(cls, rng, size)
            out.append(apply_style(gray, style, rng))
        return out


def make_stub_generator(seed: int = 0, image_size: int = 32) -> StubGenerator:
    return StubGenerator(seed, image_size)


# -- HTTP diffusion client -------------------------------------------------------


@dataclass
class DiffusionClient:
    """Text-to-image client for an HTTP service with negative-prompt support.

    Defaults follow the AUTOMATIC1111 ``/sdapi/v1/txt2img`` API; ``fields``
    renames payload keys for other services. Negatives are sent as one
    comma-separated string.
    """

    endpoint: str
    model_id: str = "runwayml/stable-diffusion-v1-5"
    guidance_scale: float = 7.5
    steps: int = 30
    path: str = "/sdapi/v1/txt2img"
    fields: dict = field(default_factory=dict)
    timeout: float = 120.0
    retries: int = 3
    backoff: float = 1.0
    image_size: int | None = None
    session: object = None

    def _key(self, name: str) -> str:
        return self.fields.get(name, name)

    def payload(self, request: GenRequest) -> dict:
        return {
            self._key("prompt"): request.positive,
            self._key("negative_prompt"): ", ".join(request.negatives),
            self._key("seed"): request.seed,
            self._key("batch_size"): request.count,
            self._key("steps"): self.steps,
            self._key("cfg_scale"): self.guidance_scale,
            self._key("model"): self.model_id,
        }

    def _post(self, body: dict) -> dict:
        import requests

        session = self.session or requests
        url = self.endpoint.rstrip("/") + self.path
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = session.post(url, json=body, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise requests.HTTPError(f"server error {resp.status_code}")
                if resp.status_code >= 400:
                    raise DataError(f"generation request rejected with {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise OpenGenUnavailable(f"generation service at {url} unavailable after {self.retries + 1} attempts: {last}")

    def generate(self, request: GenRequest) -> list[np.ndarray]:
        data = self._post(self.payload(request))
        images = data.get(self._key("images")) if isinstance(data, dict) else None
        if not isinstance(images, list):
            raise DataError("malformed generation response: no image list")
        out = []
        for item in images:
            try:
                raw = base64.b64decode(item.split(",", 1)[-1])
                with Image.open(io.BytesIO(raw)) as im:
                    im = im.convert("RGB")
                    if self.image_size:
                        im = im.resize((self.image_size, self.image_size), Image.BILINEAR)
                    out.append(np.asarray(im, dtype=np.float64) / 255.0)
            except Exception as exc:
                raise DataError(f"malformed image in generation response: {exc}") from exc
        if len(out) != request.count:
            raise DataError(f"asked for {request.count} images, service returned {len(out)}")
        return out


def make_diffusion_client(endpoint: str, model_id: str = "runwayml/stable-diffusion-v1-5",
                          guidance_scale: float = 7.5, **kwargs) -> DiffusionClient:
    return DiffusionClient(endpoint=endpoint, model_id=model_id, guidance_scale=guidance_scale, **kwargs)


# -- pool building + cache -------------------------------------------------------


def _write_json_atomic(path: Path, data) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _domain_images(generator: GeneratorBackend, request: GenRequest,
                   cache_dir: Path | None) -> tuple[list[np.ndarray], dict]:
    """Generate (or load from cache) one domain's candidates, quantized to 8 bits."""
    if cache_dir is not None:
        ddir = cache_dir / request.domain / str(request.seed)
        man_path = ddir / "manifest.json"
        if man_path.exists():
            with open(man_path) as f:
                man = json.load(f)
            if man.get("prompt_hash") == request.prompt_hash() and man.get("count") == request.count:
                imgs = [np.asarray(Image.open(ddir / e["file"]).convert("RGB"), dtype=np.float64) / 255.0
                        for e in man["images"]]
                logger.info("open pool cache hit for %s/%s", request.domain, request.seed)
                man["cache_hit"] = True
                return imgs, man
    imgs = [to_uint8(im).astype(np.float64) / 255.0 for im in generator.generate(request)]
    man = {
        "domain": request.domain,
        "seed": request.seed,
        "prompt": request.positive,
        "negatives": list(request.negatives),
        "pp_only": not request.negatives,
        "prompt_hash": request.prompt_hash(),
        "count": request.count,
        "images": [],
        "cache_hit": False,
    }
    for i, im in enumerate(imgs):
        man["images"].append({"file": f"{i}.png", "entropy": grayscale_entropy(im)})
    if cache_dir is not None:
        ddir.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(imgs):
            Image.fromarray(to_uint8(im)).save(ddir / f"{i}.png")
        _write_json_atomic(man_path, {k: v for k, v in man.items() if k != "cache_hit"})
    return imgs, man


def generate_open_pool(
    generator: GeneratorBackend,
    domains: Sequence[str],
    known_classes: Sequence[str],
    count: int,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    pp_only: bool = False,
    cache_dir: str | Path | None = None,
    workers: int = 1,
) -> tuple[OpenPool, dict]:
    """Build the filtered pseudo-open pool over ``domains``; returns pool and manifest."""
    cache = Path(cache_dir) if cache_dir is not None else None
    requests_ = []
    for d in domains:
        pos, neg = build_prompts(d, known_classes, pp_only=pp_only)
        requests_.append(GenRequest(pos, tuple(neg), count, seed, d))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        results = list(ex.map(lambda r: _domain_images(generator, r, cache), requests_))
    images, tags, per_domain = [], [], []
    for req, (imgs, man) in zip(requests_, results):
        images.extend(imgs)
        tags.extend([req.domain] * len(imgs))
        per_domain.append(man)
    hits = sum(bool(man.pop("cache_hit", False)) for man in per_domain)
    logger.info("open pool: %d of %d domains served from cache", hits, len(per_domain))
    pool = filter_pool(images, threshold, tags)
    k = 0
    for man in per_domain:
        for entry in man["images"]:
            entry["accepted"] = bool(pool.candidates[k][2])
            k += 1
    manifest = {
        "threshold": threshold,
        "pp_only": pp_only,
        "seed": seed,
        "count_per_domain": count,
        "accepted": len(pool),
        "total": len(pool.candidates),
        "acceptance_rate": pool.acceptance_rate,
        "domains": per_domain,
    }
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        for man in per_domain:
            ddir = cache / man["domain"] / str(man["seed"])
            _write_json_atomic(ddir / "manifest.json", man)
    return pool, manifest
