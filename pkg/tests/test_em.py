import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import grid_units, make_ctx, make_node, make_units
from expgraph import em
from expgraph.em import (
    compatibility_closed,
    compatibility_product,
    dummy_context,
    e_step,
    estimate_sigma,
    filter_log_likelihood,
    log_compatibility_product,
    m_step_mu,
    mu_gradient,
    select_neighbors,
)
from expgraph.errors import (
    InsufficientCandidates,
    MissingNeighborInference,
)
from expgraph.graph import SIGMA_SQ_MIN, PatternNode


def upper_pair(mu_a=(0.2, 0.2), mu_b=(0.7, 0.6), s2_a=0.01, s2_b=0.02):
    a = make_node((1, 0, 0), mu_a, s2_a)
    b = make_node((1, 0, 1), mu_b, s2_b)
    return {a.node_id: a, b.node_id: b}


class TestCompatibilityProduct:
    def test_top_layer_peak_density(self):
        node = make_node(mu=(0.4, 0.6), sigma_sq=0.02)
        dens = compatibility_product((0.4, 0.6), node, {}, dummy_context())
        assert dens == pytest.approx(1.0 / (2.0 * math.pi * 0.02), rel=1e-12)

    def test_single_neighbor_peak_location(self):
        upper = upper_pair()
        node = make_node((0, 0, 0), (0.5, 0.5), 0.01, edges=((1, 0, 0),))
        ctx = make_ctx({(1, 0, 0): ((0.3, 0.3),)})
        # shifted mean is mu_V - mu_neighbor + p_neighbor = (0.6, 0.6)
        peak = compatibility_product((0.6, 0.6), node, upper, ctx)
        assert peak == pytest.approx(1.0 / (2.0 * math.pi * 0.01), rel=1e-12)
        for probe in [(0.55, 0.6), (0.6, 0.66), (0.3, 0.3)]:
            assert compatibility_product(probe, node, upper, ctx) < peak

    def test_missing_neighbor_raises(self):
        upper = upper_pair()
        node = make_node((0, 0, 0), (0.5, 0.5), 0.01, edges=((1, 0, 0), (1, 0, 1)))
        with pytest.raises(MissingNeighborInference):
            compatibility_product((0.5, 0.5), node, upper, make_ctx({(1, 0, 0): ((0.3, 0.3),)}))
        with pytest.raises(MissingNeighborInference):
            compatibility_product((0.5, 0.5), node, {}, make_ctx({}))


class TestCompatibilityClosed:
    def test_equal_variance_shift_is_mean_displacement(self):
        upper = upper_pair(s2_a=0.01, s2_b=0.01)
        node = make_node((0, 0, 0), (0.5, 0.5), 0.01, edges=((1, 0, 0), (1, 0, 1)))
        ctx = make_ctx(
            {
                (1, 0, 0): ((0.2 + 0.02, 0.2),),
                (1, 0, 1): ((0.7, 0.6 + 0.02),),
            }
        )
        _, delta, _ = compatibility_closed((0.5, 0.5), node, upper, ctx)
        assert delta == pytest.approx([0.01, 0.01], abs=1e-15)

    def test_single_neighbor_reduces_to_displacement(self):
        upper = upper_pair(s2_a=0.013)
        node = make_node((0, 0, 0), (0.5, 0.5), 0.01, edges=((1, 0, 0),))
        ctx = make_ctx({(1, 0, 0): ((0.27, 0.16),)})
        _, delta, sst = compatibility_closed((0.5, 0.5), node, upper, ctx)
        assert delta == pytest.approx([0.27 - 0.2, 0.16 - 0.2], abs=1e-15)
        assert sst == pytest.approx(0.013, rel=1e-15)

    def test_ratio_constant_over_positions(self, rng):
        # the two routes must differ only by a factor independent of p_x
        for trial in range(20):
            m = int(rng.choice([1, 2, 5]))
            upper = {}
            edges = []
            ctx = {}
            for k in range(m):
                nid = (1, 0, k)
                upper[nid] = make_node(nid, rng.uniform(0.2, 0.8, 2), float(rng.uniform(0.002, 0.05)))
                ctx[nid] = em.ContextEntry(p=tuple(rng.uniform(0.2, 0.8, 2)), score=1.0)
                edges.append(nid)
            node = make_node((0, 0, 0), rng.uniform(0.2, 0.8, 2), 0.01, edges=tuple(edges))
            logratios = []
            for u in np.linspace(0.1, 0.9, 5):
                for v in np.linspace(0.1, 0.9, 5):
                    lp = log_compatibility_product((u, v), node, upper, ctx)
                    dens, _, _ = compatibility_closed((u, v), node, upper, ctx)
                    logratios.append(lp - math.log(dens))
            assert max(logratios) - min(logratios) < 1e-9

    def test_undetected_neighbors_drop_from_product(self):
        upper = upper_pair()
        node = make_node((0, 0, 0), (0.5, 0.5), 0.01, edges=((1, 0, 0), (1, 0, 1)))
        ctx_partial = make_ctx(
            {(1, 0, 0): ((0.3, 0.3), 1.0, True), (1, 0, 1): ((0.9, 0.9), 0.0, False)}
        )
        only = make_node((0, 0, 0), (0.5, 0.5), 0.01, edges=((1, 0, 0),))
        ctx_only = make_ctx({(1, 0, 0): ((0.3, 0.3),)})
        p = (0.55, 0.62)
        assert compatibility_product(p, node, upper, ctx_partial) == pytest.approx(
            compatibility_product(p, only, upper, ctx_only), rel=1e-12
        )

    def test_all_undetected_falls_back_to_own_gaussian(self):
        upper = upper_pair()
        node = make_node((0, 0, 0), (0.5, 0.5), 0.02, edges=((1, 0, 0), (1, 0, 1)))
        ctx = make_ctx(
            {(1, 0, 0): ((0.3, 0.3), 0.0, False), (1, 0, 1): ((0.9, 0.9), 0.0, False)}
        )
        dens = compatibility_product((0.5, 0.5), node, upper, ctx)
        assert dens == pytest.approx(1.0 / (2.0 * math.pi * 0.02), rel=1e-12)


class TestEStep:
    def test_uniform_prior_includes_noise_component(self):
        nodes = [make_node((0, 0, k), (0.5, 0.5), 0.01) for k in range(20)]
        fu = make_units([(0.5, 0.5)], [1.0])
        lognum = em._log_numerators(fu, nodes, {}, dummy_context(), tau=0.1)
        assert math.exp(lognum[0, -1]) == pytest.approx(0.1 / 21.0, rel=1e-12)

    def test_zero_density_concentrates_on_noise(self):
        node = make_node(mu=(0.9, 0.9), sigma_sq=SIGMA_SQ_MIN)
        fu = make_units([(0.1, 0.1)], [1.0])
        resp = e_step(fu, [node], {}, dummy_context(), tau=0.1)
        assert resp[0, -1] == pytest.approx(1.0, abs=1e-12)

    def test_equal_nodes_split_equally(self):
        nodes = [make_node((0, 0, k), (0.4, 0.4), 0.01) for k in range(2)]
        fu = make_units([(0.42, 0.40), (0.1, 0.9)], [1.0, 1.0])
        resp = e_step(fu, nodes, {}, dummy_context(), tau=0.1)
        assert (resp[:, 0] == resp[:, 1]).all()
        assert resp.sum(axis=1) == pytest.approx(np.ones(2), abs=1e-12)

    def test_rows_sum_to_one(self, rng):
        nodes = [
            make_node((0, 0, k), rng.uniform(0.2, 0.8, 2), float(rng.uniform(0.001, 0.05)))
            for k in range(5)
        ]
        fu = make_units(rng.uniform(0, 1, (200, 2)), rng.uniform(0, 1, 200))
        resp = e_step(fu, nodes, {}, dummy_context(), tau=0.1)
        assert np.abs(resp.sum(axis=1) - 1.0).max() < 1e-12

    def test_translation_equivariance(self, rng):
        upper = upper_pair()
        node = make_node((0, 0, 0), (0.5, 0.5), 0.008, edges=((1, 0, 0), (1, 0, 1)))
        peer = make_node((0, 0, 1), (0.3, 0.7), 0.012, edges=((1, 0, 0), (1, 0, 1)))
        pos = rng.uniform(0.2, 0.8, (30, 2))
        mass = rng.uniform(0, 1, 30)
        ctx = make_ctx({(1, 0, 0): ((0.25, 0.22),), (1, 0, 1): ((0.66, 0.64),)})
        t = np.array([0.07, -0.013])
        ctx_shift = make_ctx(
            {(1, 0, 0): ((0.25 + t[0], 0.22 + t[1]),), (1, 0, 1): ((0.66 + t[0], 0.64 + t[1]),)}
        )
        r0 = e_step(make_units(pos, mass), [node, peer], upper, ctx, tau=0.1)
        r1 = e_step(make_units(pos + t, mass), [node, peer], upper, ctx_shift, tau=0.1)
        assert np.abs(r0 - r1).max() < 1e-12


class TestMStep:
    def test_closed_form_unweighted_mean(self):
        upper = upper_pair()
        node = make_node((0, 0, 0), (0.9, 0.1), 0.01, edges=((1, 0, 0),))
        ctx = make_ctx({(1, 0, 0): ((0.2, 0.2),)})  # p == mu, so delta == 0
        units = make_units([(0.2, 0.2), (0.4, 0.4)], [1.0, 1.0])
        mu, weight = m_step_mu(node, [np.ones(2)], [units], [ctx], upper)
        assert weight == 2.0
        assert mu == pytest.approx([0.3, 0.3], abs=1e-15)

    def test_zero_weight_keeps_mu(self):
        node = make_node(mu=(0.4, 0.4))
        units = make_units([(0.2, 0.2)], [0.0])
        mu, weight = m_step_mu(node, [np.ones(1)], [units], [dummy_context()], {})
        assert weight == 0.0
        assert (mu == node.mu).all()

    def test_closed_form_matches_grid_search_oracle(self):
        upper = {(1, 0, 0): make_node((1, 0, 0), (0.4, 0.4), 0.01)}
        node = make_node((0, 0, 0), (0.5, 0.5), 0.01, edges=((1, 0, 0),))
        ctx = make_ctx({(1, 0, 0): ((0.45, 0.38),)})  # delta = (0.05, -0.02)
        units = make_units([(0.2, 0.3), (0.5, 0.5), (0.7, 0.4)], [1.0, 0.5, 2.0])
        resp = np.array([0.9, 0.8, 0.3])
        mu, _ = m_step_mu(node, [resp], [units], [ctx], upper)
        expected = (0.8 / 1.9 - 0.05, 0.71 / 1.9 + 0.02)
        assert mu == pytest.approx(expected, rel=1e-12)

        def objective(mu_probe):
            trial = replace(node)
            trial.mu = np.asarray(mu_probe)
            w = resp * units.mass
            return sum(
                wi * log_compatibility_product(p, trial, upper, ctx)
                for wi, p in zip(w, units.positions)
            )

        best = objective(mu)
        for du in np.arange(-0.05, 0.0501, 0.005):
            for dv in np.arange(-0.05, 0.0501, 0.005):
                assert objective((mu[0] + du, mu[1] + dv)) <= best + 1e-12

    def test_gradient_matches_central_differences(self, rng):
        for _ in range(5):
            upper = {}
            edges = []
            ctx = {}
            for k in range(3):
                nid = (1, 0, k)
                upper[nid] = make_node(nid, rng.uniform(0.2, 0.8, 2), float(rng.uniform(0.005, 0.03)))
                ctx[nid] = em.ContextEntry(p=tuple(rng.uniform(0.2, 0.8, 2)), score=1.0)
                edges.append(nid)
            node = make_node((0, 0, 0), rng.uniform(0.3, 0.7, 2), 0.01, edges=tuple(edges))
            units = make_units(rng.uniform(0, 1, (12, 2)), rng.uniform(0, 1, 12))
            resp = rng.uniform(0, 1, 12)

            def objective(mu_probe):
                trial = replace(node)
                trial.mu = np.asarray(mu_probe, dtype=float)
                w = resp * units.mass
                return sum(
                    wi * log_compatibility_product(p, trial, upper, ctx)
                    for wi, p in zip(w, units.positions)
                )

            grad = mu_gradient(node, [resp], [units], [ctx], upper)
            h = 1e-6
            fd = np.array(
                [
                    (objective(node.mu + [h, 0]) - objective(node.mu - [h, 0])) / (2 * h),
                    (objective(node.mu + [0, h]) - objective(node.mu - [0, h])) / (2 * h),
                ]
            )
            assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4

    def test_gradient_mode_steps_along_gradient(self):
        node = make_node(mu=(0.4, 0.4), sigma_sq=0.01)
        units = make_units([(0.6, 0.4)], [1.0])
        grad = mu_gradient(node, [np.ones(1)], [units], [dummy_context()], {})
        mu, weight = m_step_mu(
            node, [np.ones(1)], [units], [dummy_context()], {}, mode="gradient", eta=0.01
        )
        assert weight == 1.0
        assert mu == pytest.approx(node.mu + 0.01 * grad, rel=1e-15)


class TestEstimateSigma:
    def test_zero_residual_floors(self):
        node = make_node(mu=(0.5, 0.5))
        units = make_units([(0.5, 0.5), (0.5, 0.5)], [1.0, 2.0])
        s2, w = estimate_sigma(node, [np.ones(2)], [units], [dummy_context()], {})
        assert s2 == SIGMA_SQ_MIN
        assert w == 3.0

    def test_tenth_length_residuals(self):
        node = make_node(mu=(0.5, 0.5))
        units = make_units(
            [(0.6, 0.5), (0.4, 0.5), (0.5, 0.6), (0.5, 0.4)], [1.0, 1.0, 1.0, 1.0]
        )
        s2, _ = estimate_sigma(node, [np.ones(4)], [units], [dummy_context()], {})
        assert s2 == pytest.approx(0.005, rel=1e-12)

    def test_zero_weight_keeps_previous(self):
        node = make_node(sigma_sq=0.0123)
        units = make_units([(0.2, 0.2)], [0.0])
        s2, w = estimate_sigma(node, [np.ones(1)], [units], [dummy_context()], {})
        assert (s2, w) == (0.0123, 0.0)

    def test_matches_fsum_streaming_oracle(self, rng):
        upper = upper_pair()
        node = make_node((0, 0, 0), (0.45, 0.55), 0.01, edges=((1, 0, 0), (1, 0, 1)))
        ctxs, units, resp = [], [], []
        for _ in range(4):
            ctxs.append(
                make_ctx(
                    {
                        (1, 0, 0): (tuple(rng.uniform(0.1, 0.9, 2)),),
                        (1, 0, 1): (tuple(rng.uniform(0.1, 0.9, 2)),),
                    }
                )
            )
            units.append(make_units(rng.uniform(0, 1, (50, 2)), rng.uniform(0, 1, 50)))
            resp.append(rng.uniform(0, 1, 50))
        s2, _ = estimate_sigma(node, resp, units, ctxs, upper)

        terms, weights = [], []
        for r, fu, ctx in zip(resp, units, ctxs):
            _, delta, _ = compatibility_closed((0, 0), node, upper, ctx)
            for ri, p, mi in zip(r, fu.positions, fu.mass):
                res = p - (node.mu + delta)
                terms.append(ri * mi * float(res @ res))
                weights.append(ri * mi)
        expected = max(SIGMA_SQ_MIN, math.fsum(terms) / (2.0 * math.fsum(weights)))
        assert s2 == pytest.approx(expected, rel=1e-9)


# ---------------------------------------------------------------------------
# neighbor selection


def oracle_edge_set_loglik(node, edges, units_list, ctxs, upper_nodes, peers, resp, tau):
    """Independent criterion route: closed-form refit + public likelihood op."""
    trial = PatternNode(node.node_id, node.mu.copy(), node.sigma_sq, tuple(edges))
    s0 = np.array([float(np.asarray(r) @ fu.mass) for r, fu in zip(resp, units_list)])
    s1 = np.array(
        [
            (np.asarray(r) * fu.mass) @ fu.positions
            for r, fu in zip(resp, units_list)
        ]
    )
    if s0.sum() > 0:
        deltas = np.array(
            [compatibility_closed((0, 0), trial, upper_nodes, ctx)[1] for ctx in ctxs]
        )
        trial.mu = (s1 - deltas * s0[:, None]).sum(axis=0) / s0.sum()
    total = 0.0
    for fu, ctx in zip(units_list, ctxs):
        total += filter_log_likelihood(fu, [trial] + peers, upper_nodes, ctx, tau)
    return total


def rigid_instance(rng, n_img=8):
    """One candidate tracks the pattern rigidly; two others jump randomly."""
    upper = {}
    for k in range(3):
        nid = (1, 0, k)
        upper[nid] = make_node(nid, (0.3 + 0.2 * k, 0.3), 0.01)
    base = np.array([0.45, 0.55])
    offset = np.array([0.1, -0.05])
    node = make_node((0, 0, 0), base, 0.01)
    units_list, ctxs, resp = [], [], []
    for _ in range(n_img):
        t = rng.uniform(-0.15, 0.15, 2)
        q = base + t
        fu = grid_units(10, 10)
        mass = np.exp(-((fu.positions - q) ** 2).sum(axis=1) / (2 * 0.01))
        units_list.append(make_units(fu.positions, mass))
        ctxs.append(
            make_ctx(
                {
                    (1, 0, 0): (tuple(q + offset),),
                    (1, 0, 1): (tuple(rng.uniform(0.1, 0.9, 2)),),
                    (1, 0, 2): (tuple(rng.uniform(0.1, 0.9, 2)),),
                }
            )
        )
        resp.append(np.ones(100))
    return node, upper, units_list, ctxs, resp


class TestSelectNeighbors:
    def test_rigid_candidate_wins(self, rng):
        node, upper, units_list, ctxs, resp = rigid_instance(rng)
        kwargs = dict(
            units=units_list,
            ctxs=ctxs,
            upper_nodes=upper,
            peer_nodes=[],
            resp=resp,
            tau=0.1,
            prior_count=1,
        )
        picked = select_neighbors(node, list(upper), 1, **kwargs)
        assert picked == ((1, 0, 0),)
        # exhaustive singleton oracle agrees
        scores = {
            cid: oracle_edge_set_loglik(node, (cid,), units_list, ctxs, upper, [], resp, 0.1)
            for cid in upper
        }
        assert max(scores, key=lambda c: scores[c]) == (1, 0, 0)

    def test_all_candidates_forced(self, rng):
        node, upper, units_list, ctxs, resp = rigid_instance(rng)
        picked = select_neighbors(
            node,
            list(upper),
            3,
            units=units_list,
            ctxs=ctxs,
            upper_nodes=upper,
            peer_nodes=[],
            resp=resp,
            tau=0.1,
            prior_count=1,
        )
        assert picked == tuple(sorted(upper))

    def test_insufficient_candidates(self, rng):
        node, upper, units_list, ctxs, resp = rigid_instance(rng)
        with pytest.raises(InsufficientCandidates):
            select_neighbors(
                node,
                list(upper)[:2],
                3,
                units=units_list,
                ctxs=ctxs,
                upper_nodes=upper,
                peer_nodes=[],
                resp=resp,
                tau=0.1,
                prior_count=1,
            )

    def test_singleton_selection_matches_oracle_argmax(self, rng):
        for trial in range(10):
            n_img, n_units = 5, 20
            upper, ctx_maps = {}, [dict() for _ in range(n_img)]
            for k in range(6):
                nid = (1, 0, k)
                upper[nid] = make_node(nid, rng.uniform(0.2, 0.8, 2), float(rng.uniform(0.005, 0.03)))
                for ii in range(n_img):
                    ctx_maps[ii][nid] = em.ContextEntry(
                        p=tuple(rng.uniform(0.2, 0.8, 2)), score=float(rng.uniform(0, 1))
                    )
            node = make_node((0, 0, 0), rng.uniform(0.3, 0.7, 2), 0.01)
            peer = make_node((0, 0, 1), rng.uniform(0.3, 0.7, 2), 0.02)
            units_list = [
                make_units(rng.uniform(0, 1, (n_units, 2)), rng.uniform(0, 1, n_units))
                for _ in range(n_img)
            ]
            resp = [rng.uniform(0, 1, n_units) for _ in range(n_img)]
            picked = select_neighbors(
                node,
                list(upper),
                1,
                units=units_list,
                ctxs=ctx_maps,
                upper_nodes=upper,
                peer_nodes=[peer],
                resp=resp,
                tau=0.1,
                prior_count=2,
            )
            scores = {
                c: oracle_edge_set_loglik(node, (c,), units_list, ctx_maps, upper, [peer], resp, 0.1)
                for c in upper
            }
            assert picked == (max(sorted(scores), key=lambda c: scores[c]),)

    def test_greedy_near_exhaustive(self, rng):
        import itertools

        for trial in range(4):
            n_img, n_units = 5, 16
            upper = {}
            ctx_maps = [dict() for _ in range(n_img)]
            for k in range(5):
                nid = (1, 0, k)
                upper[nid] = make_node(nid, rng.uniform(0.2, 0.8, 2), float(rng.uniform(0.005, 0.03)))
                for ii in range(n_img):
                    ctx_maps[ii][nid] = em.ContextEntry(
                        p=tuple(rng.uniform(0.2, 0.8, 2)), score=float(rng.uniform(0, 1))
                    )
            node = make_node((0, 0, 0), rng.uniform(0.3, 0.7, 2), 0.01)
            peer = make_node((0, 0, 1), rng.uniform(0.3, 0.7, 2), 0.02)
            units_list = [
                make_units(rng.uniform(0, 1, (n_units, 2)), rng.uniform(0, 1, n_units))
                for _ in range(n_img)
            ]
            resp = [rng.uniform(0, 1, n_units) for _ in range(n_img)]
            picked = select_neighbors(
                node,
                list(upper),
                2,
                units=units_list,
                ctxs=ctx_maps,
                upper_nodes=upper,
                peer_nodes=[peer],
                resp=resp,
                tau=0.1,
                prior_count=2,
            )
            greedy_j = oracle_edge_set_loglik(
                node, picked, units_list, ctx_maps, upper, [peer], resp, 0.1
            )
            best_j = max(
                oracle_edge_set_loglik(node, combo, units_list, ctx_maps, upper, [peer], resp, 0.1)
                for combo in itertools.combinations(sorted(upper), 2)
            )
            assert greedy_j >= best_j - 0.05 * abs(best_j)
