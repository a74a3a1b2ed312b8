"""Trajectory domain types: episodes, macro-step tokens, masking, context.

All transformations here are value-semantic (inputs are never mutated) and
take any randomness as an explicit generator, so callers control determinism
and concurrent use is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "Episode",
    "MaskFlags",
    "MacroToken",
    "MaskSpec",
    "Chunk",
    "ContextWindow",
    "compute_return_to_go",
    "compute_macro_return",
    "segment_episode",
    "apply_token_mask",
    "sample_training_chunk",
    "slide_context",
    "zero_token",
]


@dataclass
class Episode:
    """One rollout: per-step observations, actions, rewards.

    ``regime_label`` records the hidden parameter the episode was generated
    under; it exists for diagnostics only and must never reach a model input.
    """

    observations: np.ndarray  # (T, obs_dim) float32
    actions: np.ndarray  # (T, act_dim) float32
    rewards: np.ndarray  # (T,) float32
    regime_label: float = 0.0

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        n = len(self.rewards)
        if len(self.observations) != n or len(self.actions) != n:
            raise ValueError(
                f"episode field lengths differ: obs={len(self.observations)} "
                f"act={len(self.actions)} rew={n}"
            )
        for name, arr in (("observations", self.observations), ("actions", self.actions), ("rewards", self.rewards)):
            if arr.size and not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in episode {name}")

    def __len__(self):
        return len(self.rewards)


@dataclass(frozen=True)
class MaskFlags:
    """Which fields of a token have been hidden (zeroed) on the input side."""

    rtg: bool = False
    macro_return: bool = False
    observation: bool = False
    macro_action: bool = False

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.rtg, self.macro_return, self.observation, self.macro_action],
            dtype=np.float32,
        )

    @classmethod
    def all_set(cls) -> "MaskFlags":
        return cls(True, True, True, True)


@dataclass
class MacroToken:
    """One macro-step record: long return, macro return, boundary observation,
    and the macro-action (the next L primitive actions)."""

    rtg: float
    macro_return: float
    observation: np.ndarray  # (obs_dim,)
    macro_action: np.ndarray  # (L, act_dim)
    mask_flags: MaskFlags = field(default_factory=MaskFlags)

    def __post_init__(self):
        self.observation = np.asarray(self.observation, dtype=np.float32)
        self.macro_action = np.asarray(self.macro_action, dtype=np.float32)
        if self.macro_action.ndim != 2:
            raise ValueError("macro_action must be (L, act_dim)")


def zero_token(obs_dim: int, macro_len: int, act_dim: int) -> MacroToken:
    """All-zero placeholder token with every mask flag set (used for padding)."""
    return MacroToken(
        rtg=0.0,
        macro_return=0.0,
        observation=np.zeros(obs_dim, dtype=np.float32),
        macro_action=np.zeros((macro_len, act_dim), dtype=np.float32),
        mask_flags=MaskFlags.all_set(),
    )


@dataclass(frozen=True)
class MaskSpec:
    """Input-masking rule: hide the long return everywhere, and hide the
    macro return on the last two (current and next) chunk positions."""

    mask_rtg_all: bool = True
    mask_macro_return_tail: bool = True


@dataclass
class Chunk:
    """A contiguous training window of ``context_len + 2`` tokens.

    The first ``context_len`` tokens are context; the final two are the
    current and next macro steps.  ``pad_count`` leading tokens are all-zero
    placeholders when the source episode is shorter than the window.
    """

    tokens: list[MacroToken]
    context_len: int
    pad_count: int = 0

    def __post_init__(self):
        if len(self.tokens) != self.context_len + 2:
            raise ValueError(
                f"chunk must hold context_len+2 tokens, got {len(self.tokens)} "
                f"for context_len={self.context_len}"
            )
        if self.pad_count > self.context_len:
            raise ValueError("pad_count exceeds context_len")


@dataclass(frozen=True)
class ContextWindow:
    """Chronological FIFO of recent completed macro steps.

    Each entry is (macro_return, observation, macro_action); the encoded code
    stack is attached once the tokenizer has produced it.
    """

    capacity: int
    entries: tuple = ()

    def __len__(self):
        return len(self.entries)


def compute_return_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Discounted suffix sums: out[t] = sum_{i>=t} gamma^(i-t) * rewards[i]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def compute_macro_return(rewards: Sequence[float], gamma: float) -> float:
    """Discounted sum over exactly one macro-step's rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) == 0:
        raise ValueError(f"expected a non-empty 1-D reward slice, got shape {rewards.shape}")
    return float((rewards * gamma ** np.arange(len(rewards))).sum())


def segment_episode(episode: Episode, macro_len: int, gamma: float) -> list[MacroToken]:
    """Cut an episode into macro-step tokens at boundaries t = b*L.

    A trailing remainder of fewer than L steps is dropped, and the long
    return at each boundary is computed over the retained steps only.
    """
    if macro_len < 1:
        raise ValueError("macro_len must be >= 1")
    n_macro = len(episode) // macro_len
    if n_macro == 0:
        return []
    horizon = n_macro * macro_len
    rtg = compute_return_to_go(episode.rewards[:horizon], gamma)
    tokens = []
    for b in range(n_macro):
        t = b * macro_len
        tokens.append(
            MacroToken(
                rtg=float(rtg[t]),
                macro_return=compute_macro_return(episode.rewards[t : t + macro_len], gamma),
                observation=episode.observations[t].copy(),
                macro_action=episode.actions[t : t + macro_len].copy(),
            )
        )
    return tokens


def apply_token_mask(chunk: Chunk, spec: MaskSpec) -> Chunk:
    """Zero-and-flag fields per the masking rule; originals are not mutated.

    The long return is hidden at every position; the macro return is hidden
    only at the current and next positions (the last two).  Idempotent.
    """
    c = chunk.context_len
    out_tokens = []
    for i, tok in enumerate(chunk.tokens):
        rtg, mret = tok.rtg, tok.macro_return
        flags = tok.mask_flags
        if spec.mask_rtg_all:
            rtg = 0.0
            flags = replace(flags, rtg=True)
        if spec.mask_macro_return_tail and i >= c:
            mret = 0.0
            flags = replace(flags, macro_return=True)
        out_tokens.append(
            MacroToken(
                rtg=rtg,
                macro_return=mret,
                observation=tok.observation.copy(),
                macro_action=tok.macro_action.copy(),
                mask_flags=flags,
            )
        )
    return Chunk(tokens=out_tokens, context_len=c, pad_count=chunk.pad_count)


def sample_training_chunk(
    tokens: Sequence[MacroToken], context_len: int, rng: np.random.Generator
) -> Chunk:
    """Uniformly sample a contiguous window of context_len + 2 tokens.

    Episodes shorter than the window are left-padded with flagged zero
    tokens, mirroring the cold start at deployment time.
    """
    if context_len < 0:
        raise ValueError("context_len must be >= 0")
    n = len(tokens)
    if n < 2:
        raise ValueError(f"need at least 2 macro tokens to form a chunk, got {n}")
    width = context_len + 2
    if n >= width:
        start = int(rng.integers(0, n - width + 1))
        window = list(tokens[start : start + width])
        pad = 0
    else:
        pad = width - n
        obs_dim = tokens[0].observation.shape[0]
        macro_len, act_dim = tokens[0].macro_action.shape
        window = [zero_token(obs_dim, macro_len, act_dim) for _ in range(pad)] + list(tokens)
    return Chunk(tokens=window, context_len=context_len, pad_count=pad)


def slide_context(window: ContextWindow, entry) -> ContextWindow:
    """Append the newest entry, evicting the oldest when at capacity."""
    if window.capacity <= 0:
        return window
    entries = window.entries + (entry,)
    if len(entries) > window.capacity:
        entries = entries[-window.capacity :]
    return ContextWindow(capacity=window.capacity, entries=entries)
