import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorasched.costmodel import (
    H100_SXM,
    GemmShape,
    HardwareProfile,
    TimeModelParams,
    arithmetic_intensity,
    down_projection_intensity,
    lora_memory_bytes,
    microbatch_time,
    profile_capacity,
    roundtrip_bytes,
    traffic,
)
from lorasched.errors import ValidationError

# Byte totals for the reference shape m=8192, n=k=4096, r=16, fp16, computed
# by the independent counting script and frozen here.
REF = dict(m=8192, k=4096, n=4096, r=16)
REF_FROZEN_TOTAL = 503_316_480
REF_UNFUSED_TOTAL = 1_344_536_576
REF_FUSED_TOTAL = 807_403_520


class TestArithmeticIntensity:
    def test_symmetric_case(self):
        assert arithmetic_intensity(3, 3, 3) == pytest.approx(1.0)

    def test_reference_value(self):
        assert arithmetic_intensity(16, 4096, 8192) == pytest.approx(15.907, abs=1e-3)

    def test_below_h100_machine_balance(self):
        assert arithmetic_intensity(16, 4096, 8192) < 295
        assert H100_SXM.machine_balance == pytest.approx(295.2, abs=0.5)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            arithmetic_intensity(0, 4096, 8192)

    @given(
        r=st.integers(1, 512), n=st.integers(1, 1 << 16), m=st.integers(1, 1 << 20)
    )
    @settings(max_examples=200, deadline=None)
    def test_below_min_dimension(self, r, n, m):
        assert arithmetic_intensity(r, n, m) < min(r, n, m)

    def test_tends_to_rank_for_large_dims(self):
        assert arithmetic_intensity(16, 1 << 30, 1 << 30) == pytest.approx(16.0, rel=1e-6)

    def test_first_principles_variant_uses_input_dim(self):
        # Same form with k in place of n; differs when n != k.
        assert down_projection_intensity(16, 4096, 8192) == pytest.approx(
            arithmetic_intensity(16, 4096, 8192)
        )
        assert down_projection_intensity(16, 1024, 8192) != pytest.approx(
            arithmetic_intensity(16, 4096, 8192)
        )


class TestMemoryFootprint:
    def test_reference_shape(self):
        fp = lora_memory_bytes(4096, 4096, 16)
        assert fp.full_ft_bytes == 268_435_456
        assert fp.lora_bytes == 37_748_736
        assert 7.0 <= fp.reduction_factor <= 7.2

    def test_unit_dims(self):
        fp = lora_memory_bytes(1, 1, 1)
        assert fp.full_ft_bytes == 16
        assert fp.lora_bytes == 66

    def test_trainable_fraction_reported_unreconciled(self):
        # r(n+k)/nk at the reference shape is 0.78%, reported as computed.
        fp = lora_memory_bytes(4096, 4096, 16)
        assert fp.trainable_fraction == pytest.approx(0.0078125)

    def test_reduction_monotone_in_n(self):
        factors = [lora_memory_bytes(n, 4096, 16).reduction_factor for n in (1024, 4096, 16384)]
        assert factors == sorted(factors)


class TestHardwareProfile:
    def test_balance_derived(self):
        hw = HardwareProfile(1e15, 4e12)
        assert hw.machine_balance == pytest.approx(250.0)

    def test_inconsistent_balance_rejected(self):
        with pytest.raises(ValidationError, match="inconsistent"):
            HardwareProfile(1e15, 4e12, machine_balance=100.0)


def _oracle_total(m, k, n, r, e=2, mask=1, variant="unfused"):
    """Independent byte count: enumerates the kernel lists from scratch."""
    mk, mn, kn, mr, kr, rn = m * k, m * n, k * n, m * r, k * r, r * n
    if r == 0:
        kernels = [
            (e * (mk + kn), e * mn),
            (e * (mn + kn), e * mk),
            (e * (mk + mn), e * kn),
        ]
    elif variant == "unfused":
        kernels = [
            (e * mk, e * mk + mask * mk),
            (e * (mk + kr), e * mr),
            (e * (mr + rn), e * mn),
            (e * (mk + kn), e * mn),
            (e * 2 * mn, e * mn),
            (e * (mn + rn), e * mr),
            (e * (mr + mn), e * rn),
            (e * (mr + kr), e * mk),
            (e * (mk + mr), e * kr),
            (e * (mn + kn), e * mk),
            (e * 2 * mk + mask * mk, e * mk),
        ]
    else:
        kernels = [
            (e * (mk + kr), e * mk + mask * mk + e * mr),
            (e * (mk + kn + mr + rn), e * mn),
            (e * (mn + mr + rn), e * (mr + rn)),
            (e * (mk + mr + kr), e * (kr + mk)),
            (e * (mn + kn + mk) + mask * mk, e * mk),
        ]
    return sum(r_ + w for r_, w in kernels)


class TestTraffic:
    def test_frozen_forward_is_single_gemm(self):
        shape = GemmShape(m=8192, k=4096, n=4096, r=0)
        report = traffic(shape, "forward", "unfused")
        assert report.total_bytes == (8192 * 4096 + 4096 * 4096 + 8192 * 4096) * 2
        assert len(report.kernels) == 1

    def test_totals_equal_sum_of_parts(self):
        shape = GemmShape(**REF)
        for variant in ("unfused", "fused_lora", "fused_multi_lora"):
            for pass_name in ("forward", "backward"):
                rep = traffic(shape, pass_name, variant)
                assert rep.bytes_read == sum(k.bytes_read for k in rep.kernels)
                assert rep.bytes_written == sum(k.bytes_written for k in rep.kernels)

    def test_reference_totals_match_independent_count(self):
        assert roundtrip_bytes(GemmShape(**REF), "unfused") == REF_UNFUSED_TOTAL
        assert roundtrip_bytes(GemmShape(**REF), "fused_lora") == REF_FUSED_TOTAL
        frozen = GemmShape(m=REF["m"], k=REF["k"], n=REF["n"], r=0)
        assert roundtrip_bytes(frozen, "unfused") == REF_FROZEN_TOTAL
        assert _oracle_total(**REF, variant="unfused") == REF_UNFUSED_TOTAL
        assert _oracle_total(**REF, variant="fused") == REF_FUSED_TOTAL
        assert _oracle_total(REF["m"], REF["k"], REF["n"], 0) == REF_FROZEN_TOTAL

    def test_overhead_ratio_in_band(self):
        ratio = REF_UNFUSED_TOTAL / REF_FROZEN_TOTAL
        assert 2.4 <= ratio <= 2.9

    def test_fusion_ratio_in_band(self):
        ratio = REF_FUSED_TOTAL / REF_UNFUSED_TOTAL
        assert 0.60 <= ratio <= 0.68

    def test_unfused_forward_writes_three_full_outputs(self):
        shape = GemmShape(**REF)
        rep = traffic(shape, "forward", "unfused")
        mn_bytes = shape.m * shape.n * shape.element_bytes
        writes = [k for k in rep.kernels if k.bytes_written == mn_bytes]
        assert len(writes) == 3

    def test_fused_forward_writes_output_once(self):
        shape = GemmShape(**REF)
        rep = traffic(shape, "forward", "fused_lora")
        mn_bytes = shape.m * shape.n * shape.element_bytes
        assert sum(1 for k in rep.kernels if k.bytes_written == mn_bytes) == 1

    def test_multi_adapter_adds_routing_table_only(self):
        shape = GemmShape(**REF)
        single = traffic(shape, "forward", "fused_lora")
        multi = traffic(shape, "forward", "fused_multi_lora")
        extra = multi.total_bytes - single.total_bytes
        assert 0 < extra <= 64 * 16 + 16
        assert multi.kernels[-1].kernel == "adapter_routing_table"

    @given(
        m=st.integers(1, 1 << 14),
        k=st.integers(1, 1 << 13),
        n=st.integers(1, 1 << 13),
        r=st.integers(1, 64),
        e=st.sampled_from([1, 2, 4]),
    )
    @settings(max_examples=150, deadline=None)
    def test_fusion_never_adds_traffic(self, m, k, n, r, e):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            shape = GemmShape(m=m, k=k, n=n, r=r, element_bytes=e)
        for pass_name in ("forward", "backward"):
            assert (
                traffic(shape, pass_name, "fused_lora").total_bytes
                <= traffic(shape, pass_name, "unfused").total_bytes
            )

    def test_rank_above_min_dim_warns(self):
        with pytest.warns(UserWarning, match="rank"):
            GemmShape(m=16, k=8, n=8, r=32)


class TestMicrobatchTime:
    def test_zero_tokens_costs_overhead(self):
        params = TimeModelParams(per_token_cost=1e-6, fixed_overhead=3e-4)
        assert microbatch_time(0, params) == pytest.approx(3e-4)

    def test_linear_evaluation(self):
        params = TimeModelParams(per_token_cost=1e-6, fixed_overhead=0.0)
        assert microbatch_time(4096, params) == pytest.approx(4.096e-3)

    def test_homogeneity_without_overhead(self):
        params = TimeModelParams(per_token_cost=2e-6, fixed_overhead=0.0)
        assert microbatch_time(2048, params) == pytest.approx(2 * microbatch_time(1024, params))

    def test_roofline_monotone(self):
        params = TimeModelParams(
            mode="roofline", hardware=H100_SXM, num_layers=32, hidden_size=4096
        )
        times = [microbatch_time(t, params) for t in (0, 64, 512, 4096, 32768)]
        assert times == sorted(times)
        assert times[-1] > times[0] > 0 or params.fixed_overhead == 0

    @given(tokens=st.lists(st.integers(0, 1 << 20), min_size=2, max_size=10))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_tokens(self, tokens):
        params = TimeModelParams(per_token_cost=1e-6, fixed_overhead=1e-4)
        ordered = sorted(tokens)
        values = [microbatch_time(t, params) for t in ordered]
        assert all(a <= b for a, b in zip(values, values[1:]))


class TestProfileCapacity:
    def test_single_candidate(self):
        params = TimeModelParams(per_token_cost=1e-6, fixed_overhead=1e-4)
        assert profile_capacity([1024], params, 4) == 1024

    def test_overhead_favors_largest(self):
        params = TimeModelParams(per_token_cost=1e-6, fixed_overhead=5e-4)
        assert profile_capacity([256, 512, 1024, 2048], params, 4) == 2048

    def test_no_overhead_ties_break_large(self):
        params = TimeModelParams(per_token_cost=1e-6, fixed_overhead=0.0)
        assert profile_capacity([256, 512, 1024], params, 4) == 1024

    def test_empty_candidates_rejected(self):
        params = TimeModelParams()
        with pytest.raises(ValidationError):
            profile_capacity([], params, 4)
