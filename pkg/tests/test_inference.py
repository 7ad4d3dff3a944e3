"""Inference tests: seeded sampling, guidance, embedding blending, sample IO."""

import json
import math

import numpy as np
import pytest

from rewardtune import tensorad as ta
from rewardtune.inference import (
    DEFAULT_LAMBDA_SWEEP,
    continuity_probe,
    interpolate_embeddings,
    mix_styles,
    read_sample,
    sample,
    sample_from_cond,
    write_sample,
)
from rewardtune.models import denoise, init_text_encoder, text_encode
from rewardtune.schedule import make_schedule, make_step_plan, sampler_step
from rewardtune.tensorad import Tensor
from rewardtune.util import derive_seed


class TestSample:
    def test_same_seed_reproduces_exactly(self, baseline_text, baseline_denoiser):
        plan = make_step_plan(10)
        a = sample(baseline_text, baseline_denoiser, (1, 2), plan, 7.5, seed=3)
        b = sample(baseline_text, baseline_denoiser, (1, 2), plan, 7.5, seed=3)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self, baseline_text, baseline_denoiser):
        plan = make_step_plan(10)
        a = sample(baseline_text, baseline_denoiser, (1, 2), plan, 7.5, seed=3)
        b = sample(baseline_text, baseline_denoiser, (1, 2), plan, 7.5, seed=4)
        assert not np.array_equal(a, b)

    def test_negative_guidance_rejected(self, baseline_text, baseline_denoiser):
        plan = make_step_plan(5)
        with pytest.raises(ValueError, match="non-negative"):
            sample(baseline_text, baseline_denoiser, (1,), plan, -0.5, seed=0)

    def test_unknown_sampler_rejected(self, baseline_text, baseline_denoiser):
        plan = make_step_plan(5)
        with pytest.raises(ValueError, match="unknown sampler"):
            sample(baseline_text, baseline_denoiser, (1,), plan, 1.0, seed=0,
                   sampler="heun")

    def test_unit_guidance_equals_conditional_only(self, baseline_text,
                                                   baseline_denoiser):
        # w=1 must skip the unconditional branch, matching a hand-rolled
        # conditional chain bit for bit
        plan = make_step_plan(8)
        sched = make_schedule("linear-beta", 1000)
        got = sample(baseline_text, baseline_denoiser, (2, 4), plan, 1.0, seed=9)
        rng = np.random.default_rng(derive_seed(9, "sample"))
        with ta.pause_recording():
            z = Tensor(rng.standard_normal(16).astype(np.float32))
            c = text_encode(baseline_text, (2, 4))
            for t, t_prev in plan.transitions():
                eps = denoise(baseline_denoiser, t, z, c)
                z = sampler_step("ddim", z, eps, t, t_prev, sched)
        assert np.array_equal(got, z.data)

    def test_zero_guidance_ignores_prompt(self, baseline_text, baseline_denoiser):
        plan = make_step_plan(8)
        a = sample(baseline_text, baseline_denoiser, (1,), plan, 0.0, seed=5)
        b = sample(baseline_text, baseline_denoiser, (6, 7), plan, 0.0, seed=5)
        assert np.array_equal(a, b)

    def test_euler_sampler_selectable(self, baseline_text, baseline_denoiser):
        plan = make_step_plan(10)
        ddim = sample(baseline_text, baseline_denoiser, (1,), plan, 1.0, seed=2)
        euler = sample(baseline_text, baseline_denoiser, (1,), plan, 1.0, seed=2,
                       sampler="euler")
        assert not np.array_equal(ddim, euler)
        assert np.linalg.norm(ddim - euler) < 2.0  # same target, nearby ends

    def test_single_attribute_prompts_land_on_pattern(self, baseline_world,
                                                      baseline_text,
                                                      baseline_denoiser):
        plan = make_step_plan(25)
        thresh = 2 * baseline_world.noise_scale * math.sqrt(baseline_world.d)
        for tok in baseline_world.token_ids:
            x = sample(baseline_text, baseline_denoiser, (tok,), plan, 1.0,
                       seed=derive_seed(500, tok))
            dist = np.linalg.norm(x - baseline_world.pattern_sum((tok,)))
            assert dist < thresh, f"prompt ({tok},): {dist:.3f}"


class TestInterpolateEmbeddings:
    def _pair(self):
        a = Tensor(np.linspace(-1.0, 1.0, 8).astype(np.float32))
        b = Tensor(np.linspace(2.0, -0.5, 8).astype(np.float32))
        return a, b

    def test_endpoints_are_bit_exact(self):
        a, b = self._pair()
        assert interpolate_embeddings(a, b, 0.0) is a
        assert interpolate_embeddings(a, b, 1.0) is b

    def test_midpoint_closed_form(self):
        a, b = self._pair()
        mid = interpolate_embeddings(a, b, 0.5)
        assert np.allclose(mid.data, 0.5 * (a.data + b.data), rtol=1e-7)

    def test_weight_range_enforced(self):
        a, b = self._pair()
        for lam in (-0.01, 1.01):
            with pytest.raises(ValueError, match=r"\[0, 1\]"):
                interpolate_embeddings(a, b, lam)

    def test_width_mismatch_rejected(self):
        a, _ = self._pair()
        with pytest.raises(ValueError, match="width mismatch"):
            interpolate_embeddings(a, Tensor(np.zeros(4, dtype=np.float32)), 0.5)

    def test_self_interpolation_is_identity(self):
        a, _ = self._pair()
        for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
            out = interpolate_embeddings(a, a, lam)
            assert np.allclose(out.data, a.data, rtol=1e-6)


class TestMixStyles:
    def _embeddings(self, n=4):
        rng = np.random.default_rng(12)
        return [Tensor(rng.standard_normal(8).astype(np.float32)) for _ in range(n)]

    def test_one_hot_reproduces_input_exactly(self):
        cs = self._embeddings()
        out = mix_styles([(c, 1.0 if i == 2 else 0.0) for i, c in enumerate(cs)])
        assert np.array_equal(out.data, cs[2].data)

    def test_equal_weights_of_identical_embeddings(self):
        c = self._embeddings(1)[0]
        out = mix_styles([(c, 0.25)] * 4)
        assert np.array_equal(out.data, c.data)

    def test_general_combination_matches_numpy(self):
        cs = self._embeddings(3)
        weights = (0.2, 0.3, 0.5)
        out = mix_styles(list(zip(cs, weights)))
        want = sum(w * c.data.astype(np.float64) for c, w in zip(cs, weights))
        assert np.allclose(out.data, want.astype(np.float32), rtol=1e-7)

    def test_needs_two_entries(self):
        c = self._embeddings(1)[0]
        with pytest.raises(ValueError, match="at least 2"):
            mix_styles([(c, 1.0)])

    def test_weight_sum_enforced(self):
        cs = self._embeddings(2)
        with pytest.raises(ValueError, match="sum to 1"):
            mix_styles([(cs[0], 0.6), (cs[1], 0.5)])

    def test_width_mismatch_rejected(self):
        a = Tensor(np.zeros(8, dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        with pytest.raises(ValueError, match="width mismatch"):
            mix_styles([(a, 0.5), (b, 0.5)])


class TestContinuityProbe:
    def test_sweep_shape_and_baseline_endpoint(self, baseline_text,
                                               baseline_denoiser):
        other = init_text_encoder(99)
        plan = make_step_plan(8)
        samples, dists = continuity_probe(baseline_text, other,
                                          baseline_denoiser, (3,), plan,
                                          1.0, seed=4)
        assert len(samples) == len(DEFAULT_LAMBDA_SWEEP)
        assert len(dists) == len(DEFAULT_LAMBDA_SWEEP) - 1
        assert all(math.isfinite(d) for d in dists)
        baseline = sample(baseline_text, baseline_denoiser, (3,), plan, 1.0,
                          seed=4)
        assert np.array_equal(samples[0], baseline)
        finetuned = sample(other, baseline_denoiser, (3,), plan, 1.0, seed=4)
        assert np.array_equal(samples[-1], finetuned)


class TestSampleIO:
    def test_round_trip(self, tmp_path):
        x = np.linspace(-2, 2, 16).astype(np.float32)
        meta = {"prompt": [3, 1], "seed": 7, "weights": [0.5, 0.5],
                "rewards": {"alignment": 0.25}}
        path = str(tmp_path / "sample.f32")
        write_sample(path, x, meta)
        got, got_meta = read_sample(path)
        assert np.array_equal(got, x)
        assert got_meta == json.loads(json.dumps(meta))

    def test_file_bytes_deterministic(self, tmp_path):
        x = np.arange(4, dtype=np.float32)
        meta = {"seed": 1, "prompt": [2]}
        p1 = str(tmp_path / "a.f32")
        p2 = str(tmp_path / "b.f32")
        write_sample(p1, x, meta)
        write_sample(p2, x, meta)
        for ext in ("", ".json"):
            with open(p1 + ext, "rb") as f1, open(p2 + ext, "rb") as f2:
                assert f1.read() == f2.read()

    def test_raw_payload_is_little_endian_f32(self, tmp_path):
        x = np.array([1.0, -2.0], dtype=np.float32)
        path = str(tmp_path / "c.f32")
        write_sample(path, x, {})
        with open(path, "rb") as fh:
            raw = fh.read()
        assert raw == x.astype("<f4").tobytes()

    def test_cond_sampling_used_by_probe_matches_direct(self, baseline_text,
                                                        baseline_denoiser):
        plan = make_step_plan(6)
        with ta.pause_recording():
            cond = text_encode(baseline_text, (5,))
        a = sample_from_cond(cond, baseline_denoiser, plan, 1.0, seed=8)
        b = sample(baseline_text, baseline_denoiser, (5,), plan, 1.0, seed=8)
        assert np.array_equal(a, b)
