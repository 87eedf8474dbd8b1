import numpy as np
import pytest

from cflab import editor, flowmatch, scenes
from cflab.errors import ConfigError, ShapeError


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    base = scenes.SceneSpec(height=32, width=32)
    scenes.gen_corpus(10, base, "paired", 0, root / "paired")
    scenes.gen_corpus(10, base, "unpaired", 1, root / "unpaired")
    return root


@pytest.fixture()
def state():
    return editor.build_adapter_state(seed=0)


class TestPatchEncoder:
    def test_zero_image_zero_tokens(self):
        enc = editor.PatchEncoder()
        tokens = enc.encode(np.zeros((16, 16, 3)))
        assert tokens.shape == (16, enc.token_dim)
        assert not tokens.any()

    def test_token_count(self):
        enc = editor.PatchEncoder()
        assert enc.encode(np.zeros((32, 24, 3))).shape == (8 * 6, 32)

    def test_basis_orthonormal(self):
        enc = editor.PatchEncoder()
        gram = enc.basis @ enc.basis.T
        assert np.allclose(gram, np.eye(enc.token_dim), atol=1e-12)

    def test_latent_side_invertible(self):
        enc = editor.PatchEncoder()
        rng = np.random.default_rng(0)
        z = rng.normal(size=(16, enc.token_dim))
        back = enc.encode(enc.decode(z, (16, 16)))
        assert np.allclose(back, z, atol=1e-12)

    def test_decode_encode_is_projection(self):
        enc = editor.PatchEncoder()
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(16, 16, 3))
        once = enc.decode(enc.encode(img), img.shape)
        twice = enc.decode(enc.encode(once), img.shape)
        assert np.allclose(once, twice, atol=1e-12)

    def test_backgrounds_survive_roundtrip(self):
        enc = editor.PatchEncoder()
        for style in ("flat", "gradient", "checker"):
            spec = scenes.SceneSpec(
                height=32, width=32, bg_style=style, checker_cell=8, center=(16.0, 16.0)
            )
            bg = scenes.render_scene(spec).removed
            back = enc.decode(enc.encode(bg), bg.shape)
            assert np.max(np.abs(back - bg)) < 5e-3, style

    def test_indivisible_shape_rejected(self):
        with pytest.raises(ShapeError):
            editor.PatchEncoder().encode(np.zeros((15, 16, 3)))


class TestConditionTokens:
    def test_concat_order_and_length(self):
        x = np.ones((4, 8))
        o = np.full((4, 8), 2.0)
        cond = editor.concat_condition(x, o)
        tokens = cond.tokens()
        assert tokens.shape == (8, 8)
        assert np.array_equal(tokens[:4], x)
        assert np.array_equal(tokens[4:], o)

    def test_removal_condition_has_no_object_block(self):
        cond = editor.concat_condition(np.ones((4, 8)))
        assert cond.o is None
        assert cond.tokens().shape == (4, 8)


class TestVelocityNet:
    def test_zero_lora_matches_bare_backbone(self, state):
        rng = np.random.default_rng(2)
        n_tok = 64
        z_t = rng.normal(size=(n_tok, state.encoder.token_dim))
        cond = editor.ConditionTokens(x=rng.normal(size=(n_tok, 32)))
        with_adapter = editor.velocity_net(state, z_t, cond, 0.4, "removal", "phi")
        feats = editor.assemble_features(z_t[None], cond, 0.4, (8, 8))
        bare = editor._net_forward_np(state, feats, state.tau_removal, (), z_t)
        assert np.array_equal(with_adapter, bare.reshape(n_tok, -1))

    def test_output_shape_matches_input(self, state):
        rng = np.random.default_rng(3)
        z_t = rng.normal(size=(2, 64, 32))
        cond = editor.ConditionTokens(x=rng.normal(size=(2, 64, 32)))
        out = editor.velocity_net(state, z_t, cond, 0.1, "removal", "phi")
        assert out.shape == z_t.shape

    def test_mismatched_task_pair_rejected(self, state):
        z = np.zeros((64, 32))
        cond = editor.ConditionTokens(x=np.zeros((64, 32)))
        with pytest.raises(ConfigError):
            editor.velocity_net(state, z, cond, 0.1, "removal", "theta")
        with pytest.raises(ConfigError):
            editor.velocity_net(state, z, cond, 0.1, "insertion", "phi")

    def test_tasks_differ_once_adapters_are_nonzero(self, state):
        rng = np.random.default_rng(4)
        for params in (state.lora_theta, state.lora_phi):
            for k in params:
                if k.startswith("b"):
                    params[k][:] = rng.normal(0, 0.05, size=params[k].shape)
        z_t = rng.normal(size=(64, 32))
        cond = editor.ConditionTokens(x=rng.normal(size=(64, 32)), o=rng.normal(size=(64, 32)))
        removal = editor.velocity_net(state, z_t, cond, 0.3, "removal", "phi")
        insertion = editor.velocity_net(state, z_t, cond, 0.3, "insertion", "theta")
        assert not np.allclose(removal, insertion)

    def test_swapping_condition_blocks_changes_output(self, state):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(64, 32))
        o = rng.normal(size=(64, 32))
        z_t = rng.normal(size=(64, 32))
        out = editor.velocity_net(state, z_t, editor.ConditionTokens(x=x, o=o), 0.2, "insertion", "theta")
        swapped = editor.velocity_net(state, z_t, editor.ConditionTokens(x=o, o=x), 0.2, "insertion", "theta")
        assert not np.allclose(out, swapped)


class TestTrainingPhases:
    def test_pretext_changes_params_finite_loss(self, tiny_corpus, state):
        b = editor.SceneBatch(tiny_corpus / "paired")
        w_before = state.backbone.weights[0].copy()
        losses = editor.train_pretext(b, state, steps=1, batch_size=4, seed=0)
        assert np.isfinite(losses[0])
        assert not np.array_equal(state.backbone.weights[0], w_before)

    def test_warmup_freezes_backbone_and_other_task(self, tiny_corpus, state):
        b = editor.SceneBatch(tiny_corpus / "paired")
        editor.train_pretext(b, state, steps=2, batch_size=4, seed=0)
        bb = editor.backbone_checksum(state)
        theta = editor.adapter_checksum(state, "theta")
        tau_ins = state.tau_insertion.copy()
        phi_before = editor.adapter_checksum(state, "phi")
        editor.train_warmup(b, state, "removal", steps=2, batch_size=4, seed=1)
        assert editor.backbone_checksum(state) == bb
        assert editor.adapter_checksum(state, "theta") == theta
        assert np.array_equal(state.tau_insertion, tau_ins)
        assert editor.adapter_checksum(state, "phi") != phi_before

    def test_cycleflow_truncation_contract(self, tiny_corpus, state):
        bp = editor.SceneBatch(tiny_corpus / "paired")
        bu = editor.SceneBatch(tiny_corpus / "unpaired")
        editor.train_pretext(bp, state, steps=1, batch_size=4, seed=0)
        editor.train_warmup(bp, state, "removal", steps=1, batch_size=4, seed=1)
        editor.train_warmup(bp, state, "insertion", steps=1, batch_size=4, seed=2)
        bb = editor.backbone_checksum(state)
        phi = editor.adapter_checksum(state, "phi")
        tau_rem = state.tau_removal.copy()
        theta = editor.adapter_checksum(state, "theta")
        losses = editor.train_cycleflow(bu, state, gamma=1.5, steps=2, batch_size=4, seed=3)
        assert all(np.isfinite(v) and v > 0 for v in losses)
        assert editor.backbone_checksum(state) == bb
        assert editor.adapter_checksum(state, "phi") == phi
        assert np.array_equal(state.tau_removal, tau_rem)
        assert editor.adapter_checksum(state, "theta") != theta

    def test_gamma_zero_equals_warmup_objective(self, tiny_corpus, state):
        bu = editor.SceneBatch(tiny_corpus / "unpaired")
        losses = editor.train_cycleflow(bu, state, gamma=0.0, steps=2, batch_size=4, seed=4)
        assert len(losses) == 2 and all(np.isfinite(v) for v in losses)

    def test_negative_gamma_rejected(self, tiny_corpus, state):
        bu = editor.SceneBatch(tiny_corpus / "unpaired")
        with pytest.raises(ConfigError):
            editor.train_cycleflow(bu, state, gamma=-0.5, steps=1, seed=0)

    def test_training_log_rows(self, tiny_corpus, state, tmp_path):
        b = editor.SceneBatch(tiny_corpus / "paired")
        log = editor.TrainLog(tmp_path / "log.jsonl")
        editor.train_pretext(b, state, steps=2, batch_size=4, seed=0, log=log)
        log.close()
        import json

        rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert len(rows) == 2
        assert set(rows[0]) == {"step", "phase", "loss", "cycle_loss", "gamma", "wallclock"}
        assert rows[0]["phase"] == "pretext"
        assert rows[1]["step"] == 1


class TestCycleOps:
    def test_estimates_follow_one_step_rule(self, state):
        rng = np.random.default_rng(6)
        z_t = rng.normal(size=(64, 32))
        x_tok = rng.normal(size=(64, 32))
        t = 0.3
        est = editor.cycleflow_F(state, z_t, x_tok, t)
        u = editor.velocity_net(state, z_t, editor.ConditionTokens(x=x_tok), t, "removal", "phi")
        assert np.allclose(est, flowmatch.estimate_target(z_t, u, t))

    def test_reinsertion_recovers_with_oracle_velocity(self):
        rng = np.random.default_rng(7)
        z0 = rng.normal(size=(8, 4))
        z1 = rng.normal(size=(8, 4))
        for t in (0.0, 0.4, 0.9):
            z_t = flowmatch.interpolate_path(z0, z1, t)
            est = flowmatch.estimate_target(z_t, flowmatch.linear_velocity(z0, z1), t)
            assert np.allclose(est, z1)

    def test_cycle_loss_values(self):
        z1 = np.ones((4, 4))
        assert editor.cycle_loss(z1, z1) == 0.0
        assert editor.cycle_loss(z1, z1 + 1.0) == pytest.approx(1.0)
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        acc = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(5))
        assert editor.cycle_loss(a, b) == pytest.approx(acc / 15)


class TestSampling:
    def test_fixed_seed_reproduces_output(self, tiny_corpus, state):
        b = editor.SceneBatch(tiny_corpus / "paired")
        s = b.sample(0)
        out1 = editor.sample_removal(state, s["image"], s["mask"], nfe=2, rng=np.random.default_rng(9))
        out2 = editor.sample_removal(state, s["image"], s["mask"], nfe=2, rng=np.random.default_rng(9))
        assert np.array_equal(out1, out2)

    def test_composite_preserves_far_field(self, tiny_corpus, state):
        b = editor.SceneBatch(tiny_corpus / "paired")
        s = b.sample(1)
        out = editor.sample_removal(state, s["image"], s["mask"], nfe=1, rng=np.random.default_rng(0))
        from cflab import maskops

        far = ~maskops.dilate(s["mask"], editor.COMPOSITE_MARGIN).astype(bool)
        assert np.array_equal(out[far], s["image"][far])

    def test_bad_nfe_rejected(self, tiny_corpus, state):
        b = editor.SceneBatch(tiny_corpus / "paired")
        s = b.sample(0)
        with pytest.raises(ConfigError):
            editor.sample_removal(state, s["image"], s["mask"], nfe=0)

    def test_mean_fill(self):
        img = np.zeros((4, 4, 3))
        img[:, :2] = 0.8  # half the image bright
        m = np.zeros((4, 4), dtype=np.uint8)
        m[1:3, 1:3] = 1
        out = editor.mean_fill(img, m)
        expect_fill = img[~m.astype(bool)].reshape(-1, 3).mean(axis=0)
        assert np.allclose(out[1, 1], expect_fill)
        assert np.array_equal(out[0, 0], img[0, 0])


class TestCheckpointRoundtrip:
    def test_state_roundtrip_is_exact(self, tmp_path, state):
        path = tmp_path / "s.ckpt"
        editor.save_state(path, state, extra={"phase_step": 5})
        back, adam, meta = editor.load_state(path)
        assert adam is None
        assert int(meta["phase_step"]) == 5
        assert editor.backbone_checksum(back) == editor.backbone_checksum(state)
        assert editor.adapter_checksum(back, "theta") == editor.adapter_checksum(state, "theta")
        assert np.array_equal(back.tau_removal, state.tau_removal)
        assert back.backbone.nonlin == state.backbone.nonlin

    def test_adam_roundtrip(self, tmp_path, tiny_corpus, state):
        from cflab.numerics import adam_init

        params = editor.phase_params(state, "warmup_removal")
        adam = adam_init(params, lr=3e-4)
        b = editor.SceneBatch(tiny_corpus / "paired")
        editor.train_warmup(b, state, "removal", steps=1, batch_size=4, seed=0, adam=adam)
        path = tmp_path / "s.ckpt"
        editor.save_state(path, state, adam=adam)
        _, adam_back, _ = editor.load_state(path)
        assert adam_back.step == adam.step
        for k in adam.m:
            assert np.array_equal(adam_back.m[k], adam.m[k])

    def test_checkpoint_bytes_deterministic(self, tmp_path, state):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        editor.save_state(p1, state)
        editor.save_state(p2, state)
        assert p1.read_bytes() == p2.read_bytes()
