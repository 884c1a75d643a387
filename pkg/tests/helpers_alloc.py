"""Compiled exhaustive sweep over allocation inputs.

The kernel re-simulates the allocation loops with identical float arithmetic
(IEEE doubles, ratios formed as i/100.0) so millions of configurations can
be checked in seconds. It is deliberately a second implementation: the test
cross-validates it char-for-char against the library's pure-Python path.
"""

import numpy as np
from numba import njit

M, ATT, MLP = 0, 1, 2


@njit(cache=True)
def fill_pattern(total, attention_ratio, mlp_ratio, out):
    """Write symbol codes into out[:total]. Mirrors the two allocation passes."""
    attention_count = int(np.floor(total * attention_ratio + 0.5))
    mlp_count = int(np.floor(total * mlp_ratio + 0.5))
    if attention_count + mlp_count > total:
        return -1
    mamba_count = total - attention_count
    sections = attention_count + 1
    section_len = mamba_count / sections
    for l in range(total):
        out[l] = M
    x = section_len
    for l in range(total):
        if x < 0.5:
            out[l] = ATT
            x += section_len
        else:
            x -= 1
    if mlp_count > 0:
        mamba_count -= mlp_count
        ratio = mamba_count / mlp_count
        x = ratio
        for l in range(total):
            if out[l] == M:
                if x < 0.5:
                    out[l] = MLP
                    x += ratio
                else:
                    x -= 1
    return attention_count * 10000 + mlp_count


@njit(cache=True)
def sweep_invariants(max_total):
    """Check count/endpoint invariants over total<=max_total, ratios 0..1 step .01.

    Returns (configs_checked, violations). A violation is any of:
      * attention/MLP counts not equal to their rounded targets
      * a '+' exists, the last slot was Mamba after the attention pass
        (the attention pass can itself claim the final slot when sections
        are shorter than half a layer), yet the sequence does not end '+'
      * both accumulator seeds >= 0.5, an M exists, but position 0 is not M
    """
    buf = np.zeros(max_total, dtype=np.int8)
    checked = 0
    violations = 0
    for total in range(1, max_total + 1):
        for i in range(101):
            ar = i / 100.0
            for j in range(101):
                mr = j / 100.0
                code = fill_pattern(total, ar, mr, buf)
                if code < 0:
                    continue
                checked += 1
                want_att = code // 10000
                want_mlp = code % 10000
                n_att = 0
                n_mlp = 0
                for l in range(total):
                    if buf[l] == ATT:
                        n_att += 1
                    elif buf[l] == MLP:
                        n_mlp += 1
                n_m = total - n_att - n_mlp
                if n_att != want_att or n_mlp != want_mlp:
                    violations += 1
                    continue
                # MLP never replaces attention, so a trailing ATT is exempt
                if n_mlp > 0 and buf[total - 1] != ATT and buf[total - 1] != MLP:
                    violations += 1
                    continue
                mamba_after_att = total - want_att
                section_len = mamba_after_att / (want_att + 1)
                mlp_seed_ok = True
                if want_mlp > 0:
                    mlp_seed_ok = (mamba_after_att - want_mlp) / want_mlp >= 0.5
                if n_m > 0 and section_len >= 0.5 and mlp_seed_ok and buf[0] != M:
                    violations += 1
    return checked, violations


def kernel_pattern(total, attention_ratio, mlp_ratio):
    """Python-side wrapper returning the kernel's pattern as a string."""
    buf = np.zeros(total, dtype=np.int8)
    code = fill_pattern(total, attention_ratio, mlp_ratio, buf)
    if code < 0:
        raise ValueError("rounded counts overflow")
    return "".join("M*+"[c] for c in buf[:total])
