"""Layer-kind allocation for hybrid stacks.

Given a total layer count and target attention/MLP fractions, produce the
layer sequence: attention layers spaced so the Mamba runs between them are
near-equal (runs at both ends), then MLP layers spread over the remaining
Mamba slots, biased away from the start of the sequence.

Rounded symbol counts are exact for every valid input. The begins-with-M /
ends-with-MLP endpoints hold in the intended operating regime (Mamba runs
at least half a layer long, MLPs no denser than two per Mamba); extreme
ratios can legitimately start with attention (e.g. 10 layers at 0.7
attention) or end with one (2 layers at 0.25/0.25 gives "+*").

Symbols: M = Mamba-2, 1 = Mamba-1, * = self-attention, + = MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["LayerPattern", "allocate_layers", "pattern_parse", "pattern_render"]

SYMBOLS = "M*+1"


@dataclass(frozen=True)
class LayerPattern:
    symbols: str

    def __len__(self) -> int:
        return len(self.symbols)

    def __iter__(self):
        return iter(self.symbols)

    def __getitem__(self, i) -> str:
        return self.symbols[i]

    def __str__(self) -> str:
        return self.symbols

    def counts(self) -> dict[str, int]:
        return {s: self.symbols.count(s) for s in SYMBOLS}


def _round_half_up(v: float) -> int:
    # "round" in the allocation rule is half-away-from-zero, not banker's
    return math.floor(v + 0.5)


def allocate_layers(total: int, attention_ratio: float, mlp_ratio: float) -> LayerPattern:
    """Build the layer sequence for (total, attention_ratio, mlp_ratio).

    Raises ValueError when the rounded attention+MLP counts exceed total.
    """
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if attention_ratio < 0 or mlp_ratio < 0:
        raise ValueError("ratios must be non-negative")
    attention_count = _round_half_up(total * attention_ratio)
    mlp_count = _round_half_up(total * mlp_ratio)
    if attention_count + mlp_count > total:
        raise ValueError(
            f"rounded counts overflow: {attention_count} attention + {mlp_count} MLP > {total}"
        )

    mamba_count = total - attention_count
    sections = attention_count + 1
    section_len = mamba_count / sections
    types = ["M"] * total
    x = section_len
    for l in range(total):
        if x < 0.5:
            types[l] = "*"
            x += section_len
        else:
            x -= 1

    if mlp_count > 0:
        mamba_count -= mlp_count
        ratio = mamba_count / mlp_count
        x = ratio
        for l in range(total):
            if types[l] == "M":
                if x < 0.5:
                    types[l] = "+"
                    x += ratio
                else:
                    x -= 1

    return LayerPattern("".join(types))


def pattern_parse(s: str) -> LayerPattern:
    if not s:
        raise ValueError("empty pattern")
    bad = set(s) - set(SYMBOLS)
    if bad:
        raise ValueError(f"invalid pattern symbols: {sorted(bad)} (allowed: {SYMBOLS})")
    return LayerPattern(s)


def pattern_render(p: LayerPattern) -> str:
    return p.symbols
