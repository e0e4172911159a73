#!/usr/bin/env python3
"""
toyworld.py - Synthetic Signal World for PaCo Lab

A 1-D stand-in for image sets. Every "image" is a Signal on a uniform grid
whose Fourier bands carry separable factors:
- identity: cosine modes 1..k_id (the consistency-bearing factor)
- content:  cosine modes k_id+1..k_id+k_ct (what each image of a set shows)
- style:    a quadrature warp on the sine side, invisible to extraction

The analytic oracle (true_consistency) replaces human rankers and the
alignment reward replaces a text-image similarity model.

Version: 1.0.0
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from numcore import NonFiniteError, ResolutionError, RngStream, gaussian, uniform

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

@dataclass(frozen=True)
class WorldConstants:
    """Band sizes and oracle temperatures shared by every module"""
    k_id: int = 4
    k_st: int = 2
    k_ct: int = 4
    tau_c: float = 0.5
    tau_a: float = 0.5

    @property
    def top_mode(self) -> int:
        return self.k_id + self.k_ct

    @property
    def min_resolution(self) -> int:
        return 4 * self.top_mode


DEFAULT_WORLD = WorldConstants()

# Main category -> [(subcategory, consistency dimensions)]. Metadata only.
CATEGORY_TAXONOMY: Dict[str, List[Tuple[str, Tuple[str, ...]]]] = {
    "design_style": [
        ("home_decoration", ("style",)),
        ("ip_product", ("style", "identity")),
        ("font_design", ("style",)),
        ("poster_design", ("style", "logic")),
        ("creative_style", ("style",)),
    ],
    "story": [
        ("children_book", ("logic", "identity", "style")),
        ("historical_narrative", ("logic", "identity")),
        ("movie_shot", ("logic", "identity", "style")),
        ("comic_story", ("logic", "identity", "style")),
        ("news_illustration", ("logic", "style")),
    ],
    "progression": [
        ("evolution_illustration", ("logic",)),
        ("draw_progression", ("logic", "style")),
        ("growth_progression", ("logic",)),
        ("architecture_building", ("logic",)),
        ("cooking_progression", ("logic",)),
        ("physical_law", ("logic",)),
    ],
    "instruction": [
        ("historical_panel", ("logic", "style")),
        ("activity_arrange", ("logic",)),
        ("evolution_illustration", ("logic",)),
        ("education_illustration", ("logic", "style")),
        ("travel_guide", ("logic", "style", "identity")),
        ("product_instruction", ("logic", "style")),
    ],
    "character": [
        ("multi_view", ("identity", "style")),
        ("multi_pose", ("identity",)),
        ("portrait_design", ("identity", "style")),
        ("multi_expression", ("identity",)),
        ("multi_scenario", ("identity", "logic")),
    ],
    "editing": [
        ("inpainting_replacement", ("identity",)),
        ("element_manipulation", ("identity", "style")),
        ("background_modification", ("identity", "style", "logic")),
        ("attribute_effect", ("style",)),
        ("image_editing", ("identity", "style", "logic")),
    ],
}

CATEGORY_LABELS: List[str] = [
    f"{main}/{sub}" for main, subs in CATEGORY_TAXONOMY.items() for sub, _ in subs
]


# ============================================================================
# DATA STRUCTURES
# ============================================================================

def _check_unit_range(label: str, values: np.ndarray) -> None:
    if values.size and (np.any(values < -1.0) or np.any(values > 1.0)):
        raise ValueError(f"{label} components must lie in [-1, 1]")


@dataclass
class PromptSpec:
    """Identity/style/content parameters of one prompt (a whole image set)"""
    identity: List[float]
    style: List[float]
    contents: List[List[float]]
    category_label: str = ""

    def __post_init__(self):
        self.identity = [float(v) for v in self.identity]
        self.style = [float(v) for v in self.style]
        self.contents = [[float(v) for v in c] for c in self.contents]
        if not self.contents:
            raise ValueError("a prompt needs at least one content vector")
        _check_unit_range("identity", np.asarray(self.identity))
        _check_unit_range("style", np.asarray(self.style))
        for c in self.contents:
            _check_unit_range("content", np.asarray(c))

    @property
    def set_size(self) -> int:
        return len(self.contents)

    def with_identity(self, identity: Sequence[float]) -> "PromptSpec":
        """Same prompt, different identity vector (clipped into range)"""
        clipped = np.clip(np.asarray(identity, dtype=np.float64), -1.0, 1.0)
        return PromptSpec(list(clipped), list(self.style), [list(c) for c in self.contents], self.category_label)

    def to_json(self) -> Dict:
        return {
            "identity": self.identity,
            "style": self.style,
            "contents": self.contents,
            "category_label": self.category_label,
        }

    @classmethod
    def from_json(cls, data: Dict) -> "PromptSpec":
        return cls(
            identity=data["identity"],
            style=data["style"],
            contents=data["contents"],
            category_label=data.get("category_label", ""),
        )


@dataclass
class Signal:
    """Samples of a real function on the grid u_j = j/d"""
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"signal samples must be a non-empty vector, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteError("signal contains non-finite samples")

    @property
    def d(self) -> int:
        return int(self.samples.size)

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.d) / self.d

    def to_json(self) -> List[float]:
        return [float(v) for v in self.samples]

    @classmethod
    def from_json(cls, data: Sequence[float]) -> "Signal":
        return cls(np.asarray(data, dtype=np.float64))


# ============================================================================
# RENDERING
# ============================================================================

def mode_coefficients(prompt: PromptSpec, content_index: int, world: WorldConstants = DEFAULT_WORLD) -> np.ndarray:
    """Cosine coefficients for modes 1..k_id+k_ct"""
    if len(prompt.identity) != world.k_id:
        raise ValueError(f"identity has {len(prompt.identity)} components, world expects {world.k_id}")
    content = prompt.contents[content_index]
    if len(content) != world.k_ct:
        raise ValueError(f"content has {len(content)} components, world expects {world.k_ct}")
    return np.concatenate([np.asarray(prompt.identity), np.asarray(content)])


def style_warp(style: Sequence[float]) -> float:
    """Weight of the sine quadrature added to every mode"""
    s0 = style[0] if len(style) > 0 else 0.0
    s1 = style[1] if len(style) > 1 else 0.0
    return (1.0 + 0.25 * s0) * float(np.tan(np.pi / 8.0 * s1))


def template(prompt: PromptSpec, content_index: int, u: np.ndarray, world: WorldConstants = DEFAULT_WORLD) -> np.ndarray:
    """Noiseless function value at arbitrary coordinates u in [0, 1)"""
    coeffs = mode_coefficients(prompt, content_index, world)
    phase = 2.0 * np.pi * np.outer(u, np.arange(1, coeffs.size + 1))
    return np.cos(phase) @ coeffs + style_warp(prompt.style) * (np.sin(phase) @ coeffs)


def render(
    prompt: PromptSpec,
    content_index: int,
    noise_scale: float,
    stream: RngStream,
    d: int,
    world: WorldConstants = DEFAULT_WORLD,
) -> Signal:
    """Synthesize image `content_index` of a prompt's set at resolution d"""
    if d < 8:
        raise ResolutionError(f"resolution {d} below the minimum of 8")
    if d < world.min_resolution:
        raise ResolutionError(
            f"resolution {d} cannot resolve mode {world.top_mode} (needs d >= {world.min_resolution})"
        )
    if not 0 <= content_index < prompt.set_size:
        raise IndexError(f"content index {content_index} out of range for a set of {prompt.set_size}")
    samples = template(prompt, content_index, np.arange(d) / d, world)
    if noise_scale:
        samples = samples + noise_scale * gaussian(stream, d).data
    return Signal(samples)


# ============================================================================
# FEATURE EXTRACTION
# ============================================================================

def _cosine_coefficients(x: Signal, first: int, last: int) -> np.ndarray:
    """(2/d)·Σ_j x_j cos(2π p u_j) for p = first..last"""
    spectrum = np.fft.rfft(x.samples)
    return (2.0 / x.d) * spectrum.real[first:last + 1]


def extract_identity(x: Signal, world: WorldConstants = DEFAULT_WORLD) -> np.ndarray:
    if x.d < 4 * world.k_id:
        raise ResolutionError(f"identity extraction needs d >= {4 * world.k_id}, got {x.d}")
    return _cosine_coefficients(x, 1, world.k_id)


def extract_content(x: Signal, world: WorldConstants = DEFAULT_WORLD) -> np.ndarray:
    if x.d < world.min_resolution:
        raise ResolutionError(f"content extraction needs d >= {world.min_resolution}, got {x.d}")
    return _cosine_coefficients(x, world.k_id + 1, world.top_mode)


# ============================================================================
# ORACLE & ANALYTIC REWARDS
# ============================================================================

def true_consistency(a: Signal, b: Signal, world: WorldConstants = DEFAULT_WORLD) -> float:
    diff = extract_identity(a, world) - extract_identity(b, world)
    return float(np.exp(-np.dot(diff, diff) / world.tau_c))


def alignment_reward(x: Signal, prompt: PromptSpec, content_index: int, world: WorldConstants = DEFAULT_WORLD) -> float:
    diff = extract_content(x, world) - np.asarray(prompt.contents[content_index])
    return float(np.exp(-np.dot(diff, diff) / world.tau_a))


PairScore = Callable[[Signal, Signal], float]


def consistency_reward_set(
    xs: Sequence[Signal],
    pair_score: Optional[PairScore] = None,
    world: WorldConstants = DEFAULT_WORLD,
) -> float:
    """Mean pairwise consistency over all unordered pairs of a set"""
    if len(xs) < 2:
        raise ValueError(f"set consistency needs at least 2 signals, got {len(xs)}")
    score = pair_score or (lambda a, b: true_consistency(a, b, world))
    values = [score(a, b) for a, b in itertools.combinations(xs, 2)]
    return float(np.mean(values))


def raw_cosine_score(a: Signal, b: Signal) -> float:
    """Whole-sample cosine similarity mapped to [0, 1]"""
    if a.d != b.d:
        raise ValueError(f"cosine score needs equal resolutions, got {a.d} and {b.d}")
    na, nb = np.linalg.norm(a.samples), np.linalg.norm(b.samples)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.5
    cos = float(np.dot(a.samples, b.samples) / (na * nb))
    return float(np.clip(0.5 * (1.0 + cos), 0.0, 1.0))


# ============================================================================
# PROMPT SAMPLING
# ============================================================================

def sample_prompts(
    count: int,
    set_size: int,
    stream: RngStream,
    world: WorldConstants = DEFAULT_WORLD,
) -> List[PromptSpec]:
    """Uniform identity/style/content vectors in [-1, 1] with a taxonomy label each"""
    if count < 1 or set_size < 1:
        raise ValueError("count and set_size must be positive")
    identity = uniform(stream, (count, world.k_id), -1.0, 1.0)
    style = uniform(stream, (count, world.k_st), -1.0, 1.0)
    contents = uniform(stream, (count, set_size, world.k_ct), -1.0, 1.0)
    labels = uniform(stream, count)
    prompts = []
    for i in range(count):
        label = CATEGORY_LABELS[int(labels[i] * len(CATEGORY_LABELS)) % len(CATEGORY_LABELS)]
        prompts.append(PromptSpec(list(identity[i]), list(style[i]), [list(c) for c in contents[i]], label))
    logger.debug("sampled %d prompts with set size %d", count, set_size)
    return prompts


if __name__ == "__main__":
    stream = RngStream(seed=1)
    prompt = sample_prompts(1, 4, stream)[0]
    print(f"Prompt [{prompt.category_label}] identity={np.round(prompt.identity, 3)}")
    for d in (32, 64, 128):
        x = render(prompt, 0, 0.0, stream, d)
        err = np.abs(extract_identity(x) - prompt.identity).max()
        print(f"  d={d:<4} identity error={err:.2e} alignment={alignment_reward(x, prompt, 0):.6f}")
