import numpy as np
import pytest

from hiertax.data import GeneratorConfig, generate_synthetic, stratified_split
from hiertax.nnet import grad_check, perturb_parameters
from hiertax.rng import SplitMix64
from hiertax.strategies import (
    ALL_KINDS,
    CheckpointError,
    StrategyKind,
    TrainConfig,
    build_model,
    compute_loss,
    load_model,
    predict_node_probs,
    save_model,
    train,
)
from hiertax.taxonomy import leaves, parse_taxonomy


def tiny_model(pulmonary, kind, seed=0, input_dim=8, widths=(8, 4), hidden=4):
    return build_model(pulmonary, kind, input_dim=input_dim, widths=widths,
                       hidden=hidden, seed=seed)


def random_batch(dim, n=4, seed=0):
    return SplitMix64(seed).fill_gaussian(n * dim).reshape(n, dim)


class TestBuild:
    def test_leaf_node_single_head(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.LEAF_NODE)
        assert len(m.head_modules) == 1
        assert m.head_modules[0].out.n_out == 11

    def test_leaky_dense_widths(self, pulmonary):
        m = build_model(pulmonary, StrategyKind.LEAKY_DENSE, input_dim=8,
                        widths=(8, 4), hidden=4, seed=1)
        assert [hm.out.n_out for hm in m.head_modules] == [4, 6, 5, 3]
        F = m.backbone.feature_dim
        # H2a-head hangs under H1a-head: input is features + parent hidden
        by_id = {hm.head.id: hm for hm in m.head_modules}
        assert by_id["H2a"].input_dim == F + 4
        assert by_id["H0"].input_dim == F
        assert by_id["H2a"].parent_index == 1  # H1a head

    def test_flattened_reads_features_only(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.FLATTENED)
        F = m.backbone.feature_dim
        assert all(hm.input_dim == F for hm in m.head_modules)
        assert all(hm.parent_index is None for hm in m.head_modules)

    def test_flat_taxonomy_any_kind_is_single_head(self, flat3):
        for kind in (StrategyKind.LEAF_NODE, StrategyKind.FLATTENED, StrategyKind.DENSE):
            m = build_model(flat3, kind, input_dim=4, widths=(4,), hidden=2, seed=0)
            assert len(m.head_modules) == 1
            assert m.head_modules[0].out.n_out == 3

    def test_parse_kind(self):
        assert StrategyKind.parse("leaky_dense") is StrategyKind.LEAKY_DENSE
        with pytest.raises(ValueError, match="unknown strategy"):
            StrategyKind.parse("dense_leaky")


class TestProbabilities:
    def test_leaf_node_uniform_softmax_sums(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.LEAF_NODE)
        for layer in m.layers():
            layer.W[:] = 0.0
            layer.b[:] = 0.0
        probs, leak = predict_node_probs(m, np.zeros(8))
        assert probs["H2a"] == pytest.approx(2 / 11, abs=1e-12)
        assert probs["H1a"] == pytest.approx(6 / 11, abs=1e-12)
        assert probs["H1b"] == pytest.approx(4 / 11, abs=1e-12)
        assert leak == {}

    def test_leaf_node_internal_sums_exact(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.LEAF_NODE, seed=3)
        x = random_batch(8, n=5, seed=9)
        node_probs, _ = m.predict(x)
        for tag, node in pulmonary.nodes.items():
            if node.children:
                acc = np.zeros(5)
                for ch in node.children:
                    acc = acc + node_probs[ch]
                assert (node_probs[tag] == acc).all()

    def test_chain_product(self, pulmonary):
        # conditionals multiply along the path: force known conditionals
        m = tiny_model(pulmonary, StrategyKind.FLATTENED)
        x = random_batch(8, n=1, seed=4)
        node_probs, _ = m.predict(x)
        logits, _ = m.forward(x)
        from hiertax.nnet import softmax

        conds = [softmax(lg)[0] for lg in logits]
        # P(H4a) = P(H1a|root) * P(H2a|H1a) * P(H4a|H2a)
        expected = conds[0][0] * conds[1][0] * conds[3][0]
        assert node_probs["H4a"][0] == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("kind", [k for k in ALL_KINDS if not k.leaky])
    def test_non_leaky_leaves_sum_to_one(self, pulmonary, kind):
        for seed in range(20):
            m = tiny_model(pulmonary, kind, seed=seed)
            x = random_batch(8, n=3, seed=seed + 100)
            node_probs, leak = m.predict(x)
            total = sum(node_probs[lf] for lf in leaves(pulmonary))
            assert np.abs(total - 1.0).max() <= 1e-9
            assert not leak
            for tag, p in node_probs.items():
                assert (p >= -1e-12).all() and (p <= 1.0 + 1e-9).all()

    @pytest.mark.parametrize("kind", [k for k in ALL_KINDS if k.leaky])
    def test_leaky_mass_accounting(self, pulmonary, kind):
        for seed in range(20):
            m = tiny_model(pulmonary, kind, seed=seed)
            x = random_batch(8, n=3, seed=seed + 200)
            node_probs, leak = m.predict(x)
            total = sum(node_probs[lf] for lf in leaves(pulmonary))
            assert (total <= 1.0 + 1e-9).all()
            leaked = sum(leak.values())
            assert np.abs(total + leaked - 1.0).max() <= 1e-9

    def test_parent_not_smaller_than_child(self, pulmonary):
        for kind in ALL_KINDS:
            m = tiny_model(pulmonary, kind, seed=5)
            x = random_batch(8, n=4, seed=6)
            node_probs, _ = m.predict(x)
            for tag, node in pulmonary.nodes.items():
                for ch in node.children:
                    assert (node_probs[tag] - node_probs[ch] >= -1e-12).all()

    def test_renormalize_leaky_restores_conservation(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.LEAKY_DENSE, seed=8)
        x = random_batch(8, n=2, seed=8)
        node_probs, leak = m.predict(x, renormalize_leaky=True)
        assert not leak
        total = sum(node_probs[lf] for lf in leaves(pulmonary))
        assert np.abs(total - 1.0).max() <= 1e-9


class TestMaskedLoss:
    def test_h1c_batch_non_leaky_only_root_head(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.FLATTENED, seed=2)
        x = random_batch(8, n=3, seed=3)
        weights = [np.ones(hm.out.n_out) for hm in m.head_modules]
        targets = m.targets_matrix(["H1c"] * 3)
        assert (targets[:, 1:] == -1).all()
        logits, _ = m.forward(x)
        total, _ = m.masked_loss(logits, targets, weights, want_grads=False)
        root_only, _ = m.masked_loss(
            [logits[0]], targets[:, :1], [weights[0]], want_grads=False
        )
        assert total == pytest.approx(root_only, abs=1e-12)

    def test_h1c_batch_leaky_all_heads(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.LEAKY_FLATTENED, seed=2)
        x = random_batch(8, n=3, seed=3)
        weights = [np.ones(hm.out.n_out) for hm in m.head_modules]
        targets = m.targets_matrix(["H1c"] * 3)
        assert (targets >= 0).all()
        logits, _ = m.forward(x)
        per_head = []
        for i in range(4):
            h_loss, _ = m.masked_loss([logits[i]], targets[:, i : i + 1],
                                      [weights[i]], want_grads=False)
            per_head.append(h_loss)
        total, _ = m.masked_loss(logits, targets, weights, want_grads=False)
        assert total == pytest.approx(sum(per_head), abs=1e-12)
        assert all(h > 0 for h in per_head)

    def test_single_head_reduces_to_plain_ce(self, flat3):
        m = build_model(flat3, StrategyKind.FLATTENED, input_dim=4, widths=(4,),
                        hidden=0, seed=1)
        x = random_batch(4, n=6, seed=1)
        loss = compute_loss(m, x, ["a", "b", "c", "a", "b", "c"], [np.ones(3)])
        from hiertax.nnet import weighted_ce

        logits, _ = m.forward(x)
        expected, _ = weighted_ce(logits[0], [0, 1, 2, 0, 1, 2], np.ones(3))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_masked_sample_gets_zero_gradient(self, pulmonary):
        # a batch of H1c leaves every non-root head inapplicable (non-leaky):
        # those heads' parameters must receive exactly zero gradient
        m = tiny_model(pulmonary, StrategyKind.FLATTENED, seed=4)
        x = random_batch(8, n=2, seed=5)
        weights = [np.ones(hm.out.n_out) for hm in m.head_modules]
        targets = m.targets_matrix(["H1c", "H1c"])
        m.loss_and_backward((x, targets, weights))
        for hm in m.head_modules[1:]:
            for layer in hm.layers():
                assert (layer.gW == 0).all()
                assert (layer.gb == 0).all()
        root = m.head_modules[0]
        assert np.abs(root.out.gW).max() > 0


class TestGradients:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_full_model_grad_check(self, pulmonary, kind):
        m = build_model(pulmonary, kind, input_dim=6, widths=(6, 4), hidden=3,
                        seed=11)
        perturb_parameters(m, SplitMix64(99))  # generic point, off ReLU kinks
        x = random_batch(6, n=6, seed=12)
        # labels exercise full paths, shallow paths (leaky/not-applicable)
        leafs = ["H4a", "H1c", "H3b", "H2d", "H4b", "H1c"]
        targets = m.targets_matrix(leafs)
        weights = [np.linspace(0.5, 1.5, hm.out.n_out) for hm in m.head_modules]
        err = grad_check(m, (x, targets, weights), h=1e-5)
        assert err <= 1e-4

    def test_grad_check_linear_probe_heads(self, pulmonary):
        m = build_model(pulmonary, StrategyKind.LEAKY_DENSE, input_dim=5,
                        widths=(5,), hidden=0, seed=13)
        perturb_parameters(m, SplitMix64(98))
        x = random_batch(5, n=4, seed=14)
        targets = m.targets_matrix(["H4a", "H1c", "H3a", "H2b"])
        weights = [np.ones(hm.out.n_out) for hm in m.head_modules]
        assert grad_check(m, (x, targets, weights), h=1e-5) <= 1e-4


@pytest.fixture(scope="module")
def toy_split_dataset():
    t = parse_taxonomy("r\t-\tR\na\tr\tA\nb\tr\tB\n")
    cfg = GeneratorConfig(feature_dim=6, leaf_counts={"a": 60, "b": 60},
                          level_scales=(3.0,), noise_sigma=0.5, seed=5)
    d = generate_synthetic(t, cfg)
    return t, stratified_split(d, k=5, seed=5)


class TestTraining:
    def test_loss_drops_on_separable_data(self, toy_split_dataset):
        t, d = toy_split_dataset
        cfg = TrainConfig(epochs=30, batch_size=16, seed=1)
        _, hist = train(d, t, StrategyKind.FLATTENED, cfg, widths=(8,), hidden=4)
        assert hist.losses[-1] < 0.2 * hist.losses[0]

    def test_lr_schedule_recorded(self, toy_split_dataset):
        t, d = toy_split_dataset
        cfg = TrainConfig(epochs=41, batch_size=32, seed=2)
        _, hist = train(d, t, StrategyKind.LEAF_NODE, cfg, widths=(4,), hidden=0)
        assert hist.lrs[0] == 0.01
        assert hist.lrs[20] == pytest.approx(0.01 / 3, rel=1e-12)
        assert hist.lrs[40] == pytest.approx(0.01 / 9, rel=1e-12)

    def test_deterministic_history(self, toy_split_dataset):
        t, d = toy_split_dataset
        cfg = TrainConfig(epochs=5, batch_size=8, seed=3)
        _, h1 = train(d, t, StrategyKind.LEAKY_DENSE, cfg, widths=(6,), hidden=3)
        _, h2 = train(d, t, StrategyKind.LEAKY_DENSE, cfg, widths=(6,), hidden=3)
        assert h1.losses == h2.losses
        assert h1.as_csv() == h2.as_csv()

    def test_empty_training_set(self, toy_split_dataset):
        t, d = toy_split_dataset
        test_only = d.subset({4})
        with pytest.raises(ValueError, match="empty training set"):
            train(test_only, t, StrategyKind.FLATTENED, TrainConfig(epochs=1))


class TestCheckpoint:
    def test_round_trip_all_kinds(self, pulmonary):
        x = random_batch(8, n=3, seed=21)
        for kind in ALL_KINDS:
            m = tiny_model(pulmonary, kind, seed=20)
            blob = save_model(m)
            back = load_model(blob, pulmonary)
            assert back.kind is kind
            assert save_model(back) == blob
            p1, _ = m.predict(x)
            p2, _ = back.predict(x)
            for tag in p1:
                assert (p1[tag] == p2[tag]).all()

    def test_taxonomy_hash_guard(self, pulmonary, flat3):
        m = tiny_model(pulmonary, StrategyKind.FLATTENED)
        with pytest.raises(CheckpointError, match="different taxonomy"):
            load_model(save_model(m), flat3)

    def test_truncation_detected(self, pulmonary):
        m = tiny_model(pulmonary, StrategyKind.DENSE)
        blob = save_model(m)
        with pytest.raises(CheckpointError, match="truncated|trailing"):
            load_model(blob[:-8], pulmonary)
