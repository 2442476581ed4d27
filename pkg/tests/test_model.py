import numpy as np
import pytest

from tartan.autodiff import ParamSet, backward, cross_entropy
from tartan.model import (
    BodySpec,
    HeadSpec,
    body_representation,
    build_model,
    head_output,
    joint_params,
    load_checkpoint,
    register_task_head,
    reinit_meta_head,
    save_checkpoint,
    task_output,
)


def small_model(seed=0, input_dim=4, hidden=(8,), activation="tanh"):
    return build_model(BodySpec(input_dim=input_dim, hidden_dims=hidden, activation=activation), seed)


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    if a.names() != b.names():
        return False
    return all(np.array_equal(a[n].data, b[n].data) for n in a)


class TestBuildModel:
    def test_same_seed_bit_identical(self):
        m1, m2 = small_model(seed=3), small_model(seed=3)
        assert params_equal(m1.body, m2.body)

    def test_different_seeds_differ(self):
        m1, m2 = small_model(seed=1), small_model(seed=2)
        assert not all(np.array_equal(m1.body[n].data, m2.body[n].data) for n in m1.body)

    def test_parameter_count(self):
        model = small_model(seed=0, input_dim=4, hidden=(8,))
        assert model.body.total_scalars() == 4 * 8 + 8

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            BodySpec(input_dim=0, hidden_dims=(4,))
        with pytest.raises(ValueError):
            BodySpec(input_dim=4, hidden_dims=())


class TestHeads:
    def test_register_then_forward_loss_finite(self):
        model = small_model()
        register_task_head(model, "end", HeadSpec(output_dim=3), seed=0, end_task=True)
        out = task_output(model, "end", np.ones((2, 4)))
        value = cross_entropy(out, [0, 1]).item()
        assert np.isfinite(value)

    def test_duplicate_id(self):
        model = small_model()
        register_task_head(model, "end", HeadSpec(output_dim=3), seed=0)
        with pytest.raises(ValueError, match="duplicate"):
            register_task_head(model, "end", HeadSpec(output_dim=3), seed=0)

    def test_same_seed_same_spec_identical_params(self):
        model = small_model()
        register_task_head(model, "a", HeadSpec(output_dim=3), seed=4)
        register_task_head(model, "b", HeadSpec(output_dim=3), seed=4)
        pa, pb = model.head_params("a"), model.head_params("b")
        for na, nb in zip(pa.names(), pb.names()):
            assert np.array_equal(pa[na].data, pb[nb].data)

    def test_reconstruction_head_width_mismatch(self):
        model = small_model(input_dim=4)
        with pytest.raises(ValueError, match="reconstruction"):
            register_task_head(model, "recon", HeadSpec(output_dim=6, kind="reconstruction"), seed=0)

    def test_name_disjointness(self):
        model = small_model()
        register_task_head(model, "end", HeadSpec(output_dim=3), seed=0)
        register_task_head(model, "aux", HeadSpec(output_dim=2, hidden_dim=5), seed=0)
        names = model.body.names() + model.head_params("end").names() + model.head_params("aux").names()
        assert len(names) == len(set(names))

    def test_head_locality_zero_cross_gradients(self):
        model = small_model()
        register_task_head(model, "end", HeadSpec(output_dim=3), seed=0, end_task=True)
        register_task_head(model, "aux", HeadSpec(output_dim=2), seed=0)
        out = task_output(model, "end", np.ones((2, 4)))
        node = cross_entropy(out, [0, 2])
        everything = joint_params(model, "end").merged(model.head_params("aux"))
        grads = backward(node, everything)
        for name in model.head_params("aux"):
            assert np.array_equal(grads[name], np.zeros_like(grads[name]))


class TestBodyRepresentation:
    def test_identity_body(self):
        model = small_model(input_dim=2, hidden=(2,), activation="linear")
        model.body["body.layer0.weight"].data = np.eye(2)
        model.body["body.layer0.bias"].data = np.zeros(2)
        x = np.array([[0.5, -1.5], [2.0, 0.0]])
        rep = body_representation(model, x)
        assert np.array_equal(rep.data, x)

    def test_deterministic(self):
        model = small_model(seed=8)
        x = np.linspace(-1, 1, 8).reshape(2, 4)
        r1 = body_representation(model, x).data
        r2 = body_representation(model, x).data
        assert np.array_equal(r1, r2)

    def test_composition_consistency(self):
        model = small_model(seed=8)
        register_task_head(model, "end", HeadSpec(output_dim=3), seed=1, end_task=True)
        x = np.linspace(-1, 1, 8).reshape(2, 4)
        rep = body_representation(model, x)
        via_rep = cross_entropy(head_output(model, "end", rep), [0, 1]).item()
        full = cross_entropy(task_output(model, "end", x), [0, 1]).item()
        assert via_rep == full


class TestMetaHead:
    def _with_end(self, seed=0):
        model = small_model(seed=seed)
        register_task_head(model, "end", HeadSpec(output_dim=3), seed=seed, end_task=True)
        return model

    def test_reinit_same_seed_identical(self):
        m1, m2 = self._with_end(), self._with_end()
        reinit_meta_head(m1, HeadSpec(output_dim=3), seed=5)
        reinit_meta_head(m2, HeadSpec(output_dim=3), seed=5)
        assert params_equal(m1.meta_head[1], m2.meta_head[1])

    def test_reinit_isolation(self):
        model = self._with_end()
        body_before = model.body.snapshot()
        head_before = model.head_params("end").snapshot()
        reinit_meta_head(model, HeadSpec(output_dim=3), seed=5)
        reinit_meta_head(model, HeadSpec(output_dim=3), seed=6)
        for name, arr in model.body.snapshot().items():
            assert np.array_equal(arr, body_before[name])
        for name, arr in model.head_params("end").snapshot().items():
            assert np.array_equal(arr, head_before[name])

    def test_requires_end_task(self):
        model = small_model()
        with pytest.raises(ValueError, match="end task"):
            reinit_meta_head(model, HeadSpec(output_dim=3), seed=0)

    def test_kind_must_match_end_task(self):
        model = self._with_end()
        with pytest.raises(ValueError, match="kind"):
            reinit_meta_head(model, HeadSpec(output_dim=4, kind="regression"), seed=0)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        model = small_model(seed=13)
        register_task_head(model, "end", HeadSpec(output_dim=3), seed=13, end_task=True)
        register_task_head(model, "aux", HeadSpec(output_dim=2, hidden_dim=4), seed=13)
        reinit_meta_head(model, HeadSpec(output_dim=3), seed=13)
        path = tmp_path / "model.ckpt.json"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.end_task_id == "end"
        assert params_equal(loaded.body, model.body)
        for tid in model.heads:
            assert params_equal(loaded.head_params(tid), model.head_params(tid))
        assert params_equal(loaded.meta_head[1], model.meta_head[1])
        x = np.ones((2, 4))
        assert np.array_equal(task_output(loaded, "end", x).data,
                              task_output(model, "end", x).data)

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError):
            load_checkpoint(path)
