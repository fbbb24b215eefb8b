"""Shared test helpers: independent packing oracles and workload builders.

The oracles are deliberately separate implementations (subset DP and plain
canonical enumeration) so the branch-and-bound solver is checked against
something that shares none of its code paths.
"""
from __future__ import annotations

import numpy as np

from lorasched.packing import padded_len
from lorasched.workload import (
    AdapterSpec,
    LengthComponent,
    LengthDistributionSpec,
    SampleRecord,
    assign_global_batches,
    synthesize_dataset,
)


def oracle_min_bins(samples, capacity, paddings) -> int:
    """Exhaustive minimum bin count via a DP over sample subsets."""
    n = len(samples)
    if n == 0:
        return 0
    items = list(samples)
    size = 1 << n
    pad_tot = [0] * size
    for mask in range(1, size):
        per: dict[str, int] = {}
        m = mask
        while m:
            b = (m & -m).bit_length() - 1
            s = items[b]
            per[s.adapter_id] = per.get(s.adapter_id, 0) + s.length_tokens
            m &= m - 1
        pad_tot[mask] = sum(padded_len(v, paddings[a]) for a, v in per.items())
    INF = 1 << 30
    dp = [INF] * size
    dp[0] = 0
    for mask in range(1, size):
        low = mask & -mask
        best = INF
        sub = mask
        while sub:
            if (sub & low) and pad_tot[sub] <= capacity:
                cand = dp[mask ^ sub] + 1
                if cand < best:
                    best = cand
            sub = (sub - 1) & mask
        dp[mask] = best
    return dp[size - 1]


def oracle_min_smallest(samples, capacity, paddings, n_bins) -> int | None:
    """Exhaustive minimum over smallest-bin totals across all packings into
    exactly ``n_bins`` non-empty bins (canonical enumeration, no pruning
    beyond capacity). Returns None when infeasible."""
    items = sorted(samples, key=lambda s: (-s.length_tokens, s.adapter_id, s.sample_id))
    best: list[int | None] = [None]
    bins: list[dict[str, int]] = []

    def padded_total(d: dict[str, int]) -> int:
        return sum(padded_len(v, paddings[a]) for a, v in d.items())

    def rec(i: int) -> None:
        if len(items) - i < n_bins - len(bins):
            return
        if i == len(items):
            if len(bins) == n_bins:
                obj = min(padded_total(d) for d in bins)
                if best[0] is None or obj < best[0]:
                    best[0] = obj
            return
        s = items[i]
        for d in bins:
            old = d.get(s.adapter_id, 0)
            d[s.adapter_id] = old + s.length_tokens
            if padded_total(d) <= capacity:
                rec(i + 1)
            if old:
                d[s.adapter_id] = old
            else:
                del d[s.adapter_id]
        if len(bins) < n_bins:
            single = {s.adapter_id: s.length_tokens}
            if padded_total(single) <= capacity:
                bins.append(single)
                rec(i + 1)
                bins.pop()

    rec(0)
    return best[0]


def random_instance(rng: np.random.Generator, max_samples=12, n_adapters=2,
                    capacity_range=(256, 4096), padding_choices=(1, 64)):
    """One random global-batch packing instance."""
    n = int(rng.integers(3, max_samples + 1))
    capacity = int(rng.integers(capacity_range[0], capacity_range[1] + 1))
    P = int(rng.choice(padding_choices))
    paddings = {f"t{j}": P for j in range(n_adapters)}
    samples = []
    for i in range(n):
        adapter = f"t{int(rng.integers(n_adapters))}"
        length = int(rng.integers(max(1, capacity // 8), capacity // 2 + 1))
        samples.append(SampleRecord(adapter, f"s{i:03d}", length, 0))
    return samples, capacity, paddings


# Length profiles with distinctly different scales, used wherever tests need
# a mixed multi-adapter workload.
SHORT = (LengthComponent(1.0, 300.0, 0.5, "lognormal", 16, 2048),)
MEDIUM = (LengthComponent(1.0, 700.0, 0.6, "lognormal", 16, 3000),)
LONG = (LengthComponent(1.0, 1400.0, 0.7, "lognormal", 32, 3584),)
MIXED = (
    LengthComponent(0.4, 300.0, 0.5, "lognormal", 16, 2048),
    LengthComponent(0.3, 700.0, 0.6, "lognormal", 16, 3000),
    LengthComponent(0.3, 1400.0, 0.7, "lognormal", 32, 3584),
)


def mixed_workload(adapter_count: int, samples_per_adapter: int = 64,
                   global_batch_size: int = 8, padding_multiple: int = 64):
    """Up to four adapters drawing from the three base profiles plus their
    mixture, mirroring a multi-tenant fine-tuning setup."""
    profiles = [SHORT, MEDIUM, LONG, MIXED]
    specs = []
    samples = {}
    for i in range(adapter_count):
        spec = AdapterSpec(
            f"a{i}", global_batch_size=global_batch_size, padding_multiple=padding_multiple
        )
        dist = LengthDistributionSpec(profiles[i % 4], seed=100 + i)
        records = synthesize_dataset(dist, samples_per_adapter, spec.adapter_id)
        specs.append(spec)
        samples[spec.adapter_id] = assign_global_batches(records, spec)
    return specs, samples
