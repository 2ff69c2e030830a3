import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from plm_forge import model as M
from plm_forge import sample as S
from plm_forge import seqdata as sd

TINY = M.ModelConfig(n_layers=2, n_heads=2, head_dim=8, context_len=48, vocab_size=28)
V = sd.DEFAULT_VOCAB


@pytest.fixture(scope="module")
def params():
    rng = np.random.default_rng(7)
    p = M.init_params(TINY, 7)
    return {k: (v + rng.normal(0, 0.3, v.shape)).astype(v.dtype) for k, v in p.items()}


def chi2_pvalue(samples, probs):
    counts = np.bincount(samples, minlength=probs.size)
    support = probs > 0
    assert counts[~support].sum() == 0
    if support.sum() == 1:
        return 1.0
    return stats.chisquare(counts[support], probs[support] * len(samples)).pvalue


class TestTemperature:
    def test_identity_at_one(self):
        x = np.array([0.3, -1.0, 2.0])
        np.testing.assert_array_equal(S.apply_temperature(x, 1.0), x)

    def test_closed_form(self):
        logits = np.array([0.0, math.log(3)])
        np.testing.assert_allclose(S.softmax(S.apply_temperature(logits, 1.0)), [0.25, 0.75], rtol=1e-14)
        np.testing.assert_allclose(S.softmax(S.apply_temperature(logits, 0.5)), [0.1, 0.9], rtol=1e-14)

    def test_cold_limit(self):
        logits = np.random.default_rng(0).normal(size=28)
        assert S.softmax(S.apply_temperature(logits, 1e-4)).max() > 0.999

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_invalid(self, t):
        with pytest.raises(S.SamplerConfigError):
            S.apply_temperature(np.zeros(3), t)
        with pytest.raises(S.SamplerConfigError):
            S.SamplerConfig(temperature=t)


class TestNucleus:
    def test_identity_at_one(self):
        p = np.array([0.1, 0.6, 0.3])
        np.testing.assert_allclose(S.nucleus_filter(p, 1.0), p, rtol=1e-15)

    def test_hand_case(self):
        np.testing.assert_allclose(S.nucleus_filter(np.array([0.5, 0.3, 0.2]), 0.7), [0.625, 0.375, 0.0], rtol=1e-14)

    def test_exact_mass_reached(self):
        np.testing.assert_allclose(S.nucleus_filter(np.array([0.5, 0.3, 0.2]), 0.8), [0.625, 0.375, 0.0], rtol=1e-14)

    def test_degenerate(self):
        np.testing.assert_array_equal(S.nucleus_filter(np.array([0.2, 0.7, 0.1]), 0.5), [0.0, 1.0, 0.0])

    def test_ties_prefer_lower_index(self):
        np.testing.assert_array_equal(S.nucleus_filter(np.array([0.25, 0.25, 0.25, 0.25]), 0.5), [0.5, 0.5, 0, 0])

    def test_invalid_p(self):
        with pytest.raises(S.SamplerConfigError):
            S.nucleus_filter(np.array([1.0]), 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 40), st.floats(0.05, 0.99), st.integers(0, 2**32 - 1))
    def test_minimal_and_sufficient(self, n, p, seed):
        probs = np.random.default_rng(seed).dirichlet(np.ones(n))
        out = S.nucleus_filter(probs, p)
        kept = np.flatnonzero(out)
        mass = probs[kept].sum()
        assert mass >= p * (1 - 1e-12)
        assert mass - probs[kept].min() < p
        # every dropped token is no more likely than every kept one
        dropped = np.setdiff1d(np.arange(n), kept)
        if dropped.size:
            assert probs[dropped].max() <= probs[kept].min()
        assert abs(out.sum() - 1) < 1e-12


class TestDraw:
    @pytest.mark.parametrize("t", [0.2, 1.0])
    @pytest.mark.parametrize("p", [0.5, 1.0])
    def test_chi_square(self, t, p):
        # logit spread chosen so every (t, p) keeps several tokens
        logits = np.random.default_rng(11).normal(0, 0.3, size=28)
        probs = S.sampling_distribution(logits, t, p)
        assert np.count_nonzero(probs) >= 3
        draws = S.draw(probs, np.random.default_rng(12), 100_000)
        assert chi2_pvalue(draws, probs) > 0.01

    def test_single(self):
        assert S.draw(np.array([0.0, 1.0, 0.0]), np.random.default_rng(0)) == 1


class TestGenerate:
    def test_prompt_prefix(self, params):
        for seed in range(10):
            rec = S.generate(params, TINY, S.SamplerConfig(prompt="EVQ", seed=seed, max_new_tokens=20))
            assert rec.residues.startswith("EVQ")
            assert len(rec.log_probs) == len(rec.residues) - 3 + (rec.termination == "stop-token")

    def test_c2n_prompt_is_suffix(self, params):
        rec = S.generate(params, TINY, S.SamplerConfig(prompt="EVQ", direction="C2N", seed=1, max_new_tokens=20))
        assert rec.residues.endswith("EVQ")

    def test_stop_on_first_step(self, params):
        p = {k: v.copy() for k, v in params.items()}
        p["lm_head.b"][V.c_term_id] = 1e4
        rec = S.generate(p, TINY, S.SamplerConfig(seed=0))
        assert rec.residues == "" and rec.termination == "stop-token"
        assert len(rec.log_probs) == 1 and rec.log_probs[0] > -1e-6

    def test_max_length(self, params):
        p = {k: v.copy() for k, v in params.items()}
        p["lm_head.b"][V.c_term_id] = -1e4
        rec = S.generate(p, TINY, S.SamplerConfig(seed=0, max_new_tokens=7))
        assert len(rec.residues) == 7 and rec.termination == "max-length"

    def test_context_bound(self, params):
        p = {k: v.copy() for k, v in params.items()}
        p["lm_head.b"][V.c_term_id] = -1e4
        rec = S.generate(p, TINY, S.SamplerConfig(seed=0, max_new_tokens=1000))
        assert len(rec.residues) == TINY.context_len - 1

    def test_never_emits_banned(self, params):
        p = {k: v.copy() for k, v in params.items()}
        p["lm_head.b"][[V.pad_id, V.n_term_id]] = 50.0
        for seed in range(5):
            rec = S.generate(p, TINY, S.SamplerConfig(seed=seed, max_new_tokens=30))
            assert all(c in V.residues for c in rec.residues)

    def test_log_probs_match_fresh_forward(self, params):
        for direction in ("N2C", "C2N"):
            for seed in range(3):
                cfg = S.SamplerConfig(temperature=0.7, top_p=0.9, seed=seed, direction=direction, max_new_tokens=40)
                rec = S.generate(params, TINY, cfg)
                toks = sd.tokenize(rec.residues, direction).tokens
                if rec.termination == "max-length":
                    toks = toks[:-1]
                fresh = M.token_log_probs(params, TINY, toks)
                assert np.max(np.abs(fresh - rec.log_probs)) < 1e-5

    def test_cached_equals_uncached(self, params):
        for seed in range(5):
            a = S.generate(params, TINY, S.SamplerConfig(seed=seed, max_new_tokens=40))
            b = S.generate(params, TINY, S.SamplerConfig(seed=seed, max_new_tokens=40, use_cache=False))
            assert a.residues == b.residues
            assert np.max(np.abs(np.array(a.log_probs) - b.log_probs)) < 1e-5

    def test_deterministic(self, params):
        cfg = S.SamplerConfig(seed=5, max_new_tokens=30)
        assert S.generate(params, TINY, cfg) == S.generate(params, TINY, cfg)

    def test_bad_prompt(self, params):
        with pytest.raises(S.SamplerConfigError):
            S.generate(params, TINY, S.SamplerConfig(prompt="EV1"))
        with pytest.raises(S.SamplerConfigError):
            S.generate(params, TINY, S.SamplerConfig(prompt="A" * 60))


class TestSweep:
    def test_counts_and_provenance(self, params):
        base = S.SamplerConfig(max_new_tokens=5, seed=3)
        recs = S.sweep(params, TINY, [0.2, 1.0], [0.5, 0.9, 1.0], 4, base)
        assert len(recs) == 24
        cells = {}
        for r in recs:
            cells.setdefault(r.cell, []).append(r)
            assert (r.config.temperature, r.config.top_p) == r.cell
            assert r.id.startswith(f"gen_T{r.cell[0]:g}_P{r.cell[1]:g}_")
        assert all(len(v) == 4 for v in cells.values()) and len(cells) == 6
        assert len({r.config.seed for r in recs}) == 24

    def test_deterministic_and_threaded(self, params):
        base = S.SamplerConfig(max_new_tokens=6, seed=1)
        a = S.sweep(params, TINY, [0.4], [0.7], 5, base)
        b = S.sweep(params, TINY, [0.4], [0.7], 5, base, threads=3)
        assert S.library_fasta(a) == S.library_fasta(b)

    def test_cell_seeds_independent_of_set(self):
        assert S.cell_seed(0, 0.2, 0.5, 3) == S.cell_seed(0, 0.2, 0.5, 3)
        assert S.cell_seed(0, 0.2, 0.5, 3) != S.cell_seed(1, 0.2, 0.5, 3)

    def test_empty(self, params):
        with pytest.raises(S.SamplerConfigError):
            S.sweep(params, TINY, [], [1.0], 1)

    def test_library_formats(self, params):
        recs = S.sweep(params, TINY, [1.0], [1.0], 2, S.SamplerConfig(max_new_tokens=80, seed=0))
        fasta = S.library_fasta(recs)
        parsed = sd.parse_fasta(fasta)
        assert [r.residues for r in parsed] == [r.residues for r in recs]
        assert parsed[0].id.split("|")[1:3] == ["T=1", "P=1"]
        rows = S.library_csv(recs).splitlines()
        assert rows[0] == "id,temperature,top_p,seed,termination,length,mean_log_prob" and len(rows) == 3


class TestDedupe:
    def _rec(self, s):
        return S.GeneratedRecord(s, S.SamplerConfig(), [], "stop-token")

    def test_unchanged(self):
        recs = [self._rec(s) for s in ("A", "B", "C")]
        assert S.dedupe(recs) == recs

    def test_all_identical(self):
        assert len(S.dedupe([self._rec("MK")] * 5)) == 1

    def test_planted_duplicates(self):
        rng = np.random.default_rng(0)
        letters = list(sd.CANONICAL)
        uniques = list(dict.fromkeys("".join(rng.choice(letters, 12)) for _ in range(200)))
        stream = [self._rec(s) for s in uniques]
        for _ in range(300):
            stream.insert(int(rng.integers(len(stream) + 1)), self._rec(uniques[rng.integers(len(uniques))]))
        out = S.dedupe(stream)
        seen = []
        for r in stream:
            if r.residues not in seen:
                seen.append(r.residues)
        assert [r.residues for r in out] == seen
        assert sorted(seen) == sorted(uniques)
