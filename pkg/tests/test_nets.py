import numpy as np
import pytest

from poseimit import autodiff as ad
from poseimit import nets

from conftest import central_diff_tensor, rel_err


def sigma(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestGru:
    def test_zero_params_zero_hidden(self):
        cell = nets.GruCell(3, 4)
        with ad.Tape():
            h = nets.gru_step(np.ones(3), np.zeros(4), cell)
        assert np.array_equal(h.values, np.zeros(4))

    def test_zero_params_unit_hidden(self):
        # z = sigmoid(0) = 0.5, candidate = tanh(0) = 0,
        # h' = (1 - z) * h + z * 0 = 0.5 per entry.
        cell = nets.GruCell(3, 4)
        with ad.Tape():
            h = nets.gru_step(np.ones(3), np.ones(4), cell)
        assert np.allclose(h.values, 0.5, atol=1e-15)

    def test_deterministic_repeat(self):
        cell = nets.GruCell(3, 4, rng=np.random.default_rng(0))
        x, h0 = np.linspace(-1, 1, 3), np.linspace(0, 1, 4)
        with ad.Tape():
            a = nets.gru_step(x, h0, cell)
        with ad.Tape():
            b = nets.gru_step(x, h0, cell)
        assert a.values.tobytes() == b.values.tobytes()

    def test_dimension_mismatch(self):
        cell = nets.GruCell(3, 4)
        with ad.Tape(), pytest.raises(ad.ShapeError):
            nets.gru_step(np.ones(5), np.zeros(4), cell)


class TestLstm:
    def test_zero_everything(self):
        cell = nets.LstmCell(3, 4)
        with ad.Tape():
            h, c = nets.lstm_step(np.ones(3), np.zeros(4), np.zeros(4), cell)
        assert np.array_equal(h.values, np.zeros(4))
        assert np.array_equal(c.values, np.zeros(4))

    def test_forget_bias_path(self):
        # Zero params except forget bias 1 and c = 1:
        # c' = sigmoid(1) * 1, h' = sigmoid(0) * tanh(c').
        cell = nets.LstmCell(2, 3)
        cell.p["b_f"].values = np.ones(3)
        with ad.Tape():
            h, c = nets.lstm_step(np.zeros(2), np.zeros(3), np.ones(3), cell)
        assert np.allclose(c.values, sigma(1.0), atol=1e-15)
        assert np.allclose(h.values, 0.5 * np.tanh(sigma(1.0)), atol=1e-15)

    def test_fresh_cell_has_forget_bias_one(self):
        cell = nets.LstmCell(2, 3, rng=np.random.default_rng(1))
        assert np.array_equal(cell.p["b_f"].values, np.ones(3))

    def test_deterministic_repeat(self):
        cell = nets.LstmCell(3, 4, rng=np.random.default_rng(2))
        x, h0, c0 = np.ones(3), np.zeros(4), np.linspace(0, 1, 4)
        with ad.Tape():
            a = nets.lstm_step(x, h0, c0, cell)[0]
        with ad.Tape():
            b = nets.lstm_step(x, h0, c0, cell)[0]
        assert a.values.tobytes() == b.values.tobytes()


class TestPolicy:
    def test_output_shape_matches_protocol(self):
        # 50 observed frames of 54-entry poses in, 5 frames out.
        policy = nets.Policy(54, hidden=16, rng=np.random.default_rng(3))
        state = np.random.default_rng(4).uniform(-1, 1, size=(50, 54))
        with ad.Tape():
            out = policy.forward(state, 5)
        assert out.shape == (5, 54)

    def test_zero_params_zero_output(self):
        policy = nets.Policy(3, hidden=4)
        state = np.random.default_rng(5).uniform(-1, 1, size=(6, 3))
        with ad.Tape():
            out = policy.forward(state, 4)
        assert np.array_equal(out.values, np.zeros((4, 3)))

    def test_deterministic_repeat(self):
        policy = nets.Policy(3, hidden=5, rng=np.random.default_rng(6))
        state = np.random.default_rng(7).uniform(-1, 1, size=(4, 3))
        with ad.Tape():
            a = policy.forward(state, 3)
        with ad.Tape():
            b = policy.forward(state, 3)
        assert a.values.tobytes() == b.values.tobytes()

    def test_empty_state_rejected(self):
        policy = nets.Policy(3, hidden=4)
        with ad.Tape(), pytest.raises(ad.ShapeError):
            policy.forward(np.zeros((0, 3)), 2)

    def test_pose_dim_mismatch_rejected(self):
        policy = nets.Policy(3, hidden=4)
        with ad.Tape(), pytest.raises(ad.ShapeError):
            policy.forward(np.zeros((5, 2)), 2)

    def test_output_length_always_m(self):
        policy = nets.Policy(2, hidden=4, rng=np.random.default_rng(8))
        state = np.random.default_rng(9).uniform(-1, 1, size=(3, 2))
        for m in (1, 2, 5):
            with ad.Tape():
                assert policy.forward(state, m).shape == (m, 2)

    def test_teacher_forcing_differs_from_autoregressive(self):
        policy = nets.Policy(2, hidden=6, rng=np.random.default_rng(10))
        state = np.random.default_rng(11).uniform(-1, 1, size=(4, 2))
        teacher = np.random.default_rng(12).uniform(-1, 1, size=(2, 2))
        with ad.Tape():
            free = policy.forward(state, 3)
        with ad.Tape():
            forced = policy.forward(state, 3, teacher=teacher)
        assert np.array_equal(free.values[0], forced.values[0])
        assert not np.array_equal(free.values[1:], forced.values[1:])

    def test_residual_output_adds_decoder_input(self):
        rng = np.random.default_rng(13)
        base = nets.Policy(2, hidden=4, rng=np.random.default_rng(13))
        res = nets.Policy(2, hidden=4, rng=np.random.default_rng(13), residual_output=True)
        state = rng.uniform(-1, 1, size=(3, 2))
        with ad.Tape():
            a = base.forward(state, 1)
        with ad.Tape():
            b = res.forward(state, 1)
        assert np.allclose(b.values, a.values + state[-1], atol=1e-15)

    def test_param_gradients_match_finite_differences(self):
        policy = nets.Policy(3, hidden=6, rng=np.random.default_rng(14))
        state = np.random.default_rng(15).uniform(-1, 1, size=(5, 3))
        probe = np.random.default_rng(16).uniform(-1, 1, size=(2, 3))

        def scalar():
            with ad.Tape():
                out = policy.forward(state, 2)
                return ad.sum_all(ad.mul(out, ad.tensor(probe))).item()

        with ad.Tape():
            out = policy.forward(state, 2)
            s = ad.sum_all(ad.mul(out, ad.tensor(probe)))
            grads = ad.gradient(s, policy.param_tensors(), create_graph=False)

        for (name, t), g in zip(policy.named_params(), grads):
            numeric = central_diff_tensor(scalar, t)
            assert rel_err(g.values, numeric) < 1e-4, name


class TestCritic:
    def test_zero_params_score_zero(self):
        critic = nets.Critic(3, hidden=4, mlp_widths=(8, 4, 1))
        state = np.random.default_rng(17).uniform(-1, 1, size=(5, 3))
        action = np.random.default_rng(18).uniform(-1, 1, size=(2, 3))
        with ad.Tape():
            v = critic.forward(state, action)
        assert v.shape == ()
        assert v.item() == 0.0

    def test_full_scale_scalar_output(self):
        critic = nets.Critic(54, hidden=1024, rng=np.random.default_rng(19))
        state = np.random.default_rng(20).uniform(-1, 1, size=(50, 54))
        action = np.random.default_rng(21).uniform(-1, 1, size=(5, 54))
        with ad.no_grad():
            v = critic.forward(state, action)
        assert v.shape == ()
        assert np.isfinite(v.item())

    def test_deterministic_repeat(self):
        critic = nets.Critic(2, hidden=4, mlp_widths=(4, 1), rng=np.random.default_rng(22))
        state = np.random.default_rng(23).uniform(-1, 1, size=(4, 2))
        action = np.random.default_rng(24).uniform(-1, 1, size=(2, 2))
        with ad.Tape():
            a = critic.forward(state, action)
        with ad.Tape():
            b = critic.forward(state, action)
        assert a.values.tobytes() == b.values.tobytes()

    def test_empty_inputs_rejected(self):
        critic = nets.Critic(2, hidden=4, mlp_widths=(4, 1))
        with ad.Tape(), pytest.raises(ad.ShapeError):
            critic.forward(np.zeros((0, 2)), np.zeros((2, 2)))

    def test_param_gradients_match_finite_differences(self):
        critic = nets.Critic(
            2, hidden=4, mlp_widths=(8, 6, 4, 1), rng=np.random.default_rng(25)
        )
        state = np.random.default_rng(26).uniform(-1, 1, size=(5, 2))
        action = np.random.default_rng(27).uniform(-1, 1, size=(2, 2))

        def scalar():
            with ad.Tape():
                return critic.forward(state, action).item()

        with ad.Tape():
            v = critic.forward(state, action)
            grads = ad.gradient(v, critic.param_tensors(), create_graph=False)

        for (name, t), g in zip(critic.named_params(), grads):
            numeric = central_diff_tensor(scalar, t)
            assert rel_err(g.values, numeric) < 1e-4, name

    def test_input_gradients_match_finite_differences(self):
        critic = nets.Critic(2, hidden=4, mlp_widths=(6, 1), rng=np.random.default_rng(28))
        s0 = np.random.default_rng(29).uniform(-1, 1, size=(4, 2))
        a0 = np.random.default_rng(30).uniform(-1, 1, size=(2, 2))

        s_leaf = ad.tensor(s0)
        a_leaf = ad.tensor(a0)
        with ad.Tape():
            v = critic.forward(s_leaf, a_leaf)
            gs, ga = ad.gradient(v, [s_leaf, a_leaf], create_graph=False)

        def f_state():
            with ad.Tape():
                return critic.forward(s_leaf, a_leaf).item()

        assert rel_err(gs.values, central_diff_tensor(f_state, s_leaf)) < 1e-4
        assert rel_err(ga.values, central_diff_tensor(f_state, a_leaf)) < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        policy = nets.Policy(3, hidden=5, rng=np.random.default_rng(31))
        path = tmp_path / "p.ckpt"
        nets.save_checkpoint(path, policy.named_params(), precision="test")
        named, precision = nets.load_checkpoint(path)
        assert precision == "test"
        for name, t in policy.named_params():
            assert named[name].tobytes() == t.values.tobytes()

    def test_file_round_trip_bytes_stable(self, tmp_path):
        critic = nets.Critic(2, hidden=3, mlp_widths=(4, 1), rng=np.random.default_rng(32))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nets.save_checkpoint(p1, critic.named_params(), precision="test")
        named, _ = nets.load_checkpoint(p1)
        nets.save_checkpoint(p2, named, precision="test")
        assert p1.read_bytes() == p2.read_bytes()

    def test_rebuild_policy_from_checkpoint(self, tmp_path):
        policy = nets.Policy(3, hidden=5, rng=np.random.default_rng(33))
        path = tmp_path / "p.ckpt"
        nets.save_checkpoint(path, policy.named_params(), precision="test")
        named, _ = nets.load_checkpoint(path)
        clone = nets.Policy.from_named(named)
        state = np.random.default_rng(34).uniform(-1, 1, size=(4, 3))
        with ad.Tape():
            a = policy.forward(state, 2)
        with ad.Tape():
            b = clone.forward(state, 2)
        assert a.values.tobytes() == b.values.tobytes()

    def test_rebuild_critic_from_checkpoint(self, tmp_path):
        critic = nets.Critic(2, hidden=3, mlp_widths=(6, 4, 1), rng=np.random.default_rng(35))
        path = tmp_path / "c.ckpt"
        nets.save_checkpoint(path, critic.named_params(), precision="test")
        named, _ = nets.load_checkpoint(path)
        clone = nets.Critic.from_named(named)
        assert clone.mlp_widths == (6, 4, 1)
        s = np.random.default_rng(36).uniform(-1, 1, size=(3, 2))
        a = np.random.default_rng(37).uniform(-1, 1, size=(2, 2))
        with ad.Tape():
            va = critic.forward(s, a)
        with ad.Tape():
            vb = clone.forward(s, a)
        assert va.values.tobytes() == vb.values.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(nets.CheckpointError):
            nets.load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        policy = nets.Policy(2, hidden=3, rng=np.random.default_rng(38))
        path = tmp_path / "p.ckpt"
        nets.save_checkpoint(path, policy.named_params())
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(nets.CheckpointError):
            nets.load_checkpoint(path)

    def test_shape_mismatch_on_load_state(self):
        a = nets.Policy(3, hidden=4, rng=np.random.default_rng(39))
        b = nets.Policy(3, hidden=5, rng=np.random.default_rng(40))
        named = {name: t.values for name, t in b.named_params()}
        with pytest.raises(nets.CheckpointError):
            a.load_state(named)

    def test_train_precision_round_trip(self, tmp_path):
        vals = {"x": np.array([1.5, -2.25], dtype=np.float32)}
        path = tmp_path / "t.ckpt"
        nets.save_checkpoint(path, vals, precision="train")
        named, precision = nets.load_checkpoint(path)
        assert precision == "train"
        assert named["x"].dtype == np.float32
        assert named["x"].tobytes() == vals["x"].tobytes()
