"""Parameter store, Adam and the checkpoint codec."""
import msgpack
import numpy as np
import pytest

from common.errors import CheckpointError, DataError
from engine.params import (
    CHECKPOINT_FORMAT,
    GROUPS,
    ParameterStore,
    accumulate,
    adam_step,
    dump_checkpoint,
    load_into,
    read_checkpoint,
)


@pytest.fixture
def store():
    store = ParameterStore(seed=3)
    store.linear("enc", 4, 3, "theta")
    store.uniform("head", (3,), 3, "phi")
    return store


class TestParameterStore:
    def test_registration(self, store):
        """Names are unique and grouped."""
        assert list(store) == ["enc.W", "enc.b", "head"]
        assert store.names("theta") == ["enc.W", "enc.b"]
        assert store.size() == 4 * 3 + 3 + 3
        with pytest.raises(DataError):
            store.add("head", np.zeros(3), "phi")
        with pytest.raises(DataError):
            store.add("other", np.zeros(3), "nowhere")

    def test_initialisation_bounds(self, store):
        """Uniform init stays inside 1 / sqrt(fan_in)."""
        assert np.all(np.abs(store["enc.W"].values) <= 0.5)

    def test_seeded_initialisation(self, store):
        """The same seed gives the same values."""
        again = ParameterStore(seed=3)
        again.linear("enc", 4, 3, "theta")
        assert np.array_equal(again["enc.W"].values, store["enc.W"].values)

    def test_model_groups_partition(self, model):
        """Every model parameter belongs to exactly one group."""
        names = [n for group in GROUPS for n in model.store.names(group)]
        assert sorted(names) == sorted(model.store)
        assert len(names) == len(set(names))
        assert "relations" in model.store.names("theta")
        assert "context.0.W" in model.store.names("theta")
        assert model.store.names("phi") == ["head.W", "head.b"]
        assert all(n.startswith("fuse.") for n in model.store.names("psi"))
        assert "fuse.project.W" in model.store.names("psi")

    def test_snapshot_restore(self, store):
        """Restoring a snapshot undoes later changes."""
        saved = store.snapshot()
        store["head"].values = np.zeros(3)
        store.restore(saved)
        assert np.array_equal(store["head"].values, saved["head"])
        with pytest.raises(CheckpointError):
            store.restore({"head": np.zeros(4)})


class TestAdam:
    def test_first_step_moves_by_lr(self, store):
        """Bias correction makes the first step lr times the sign."""
        before = store.snapshot()
        grads = {name: np.full_like(v, -2.0) for name, v in before.items()}
        adam_step(store, grads, lr=0.1)
        np.testing.assert_allclose(
            store["head"].values - before["head"], 0.1, rtol=1e-6
        )
        assert store.step == 1

    def test_zero_gradient_keeps_values(self, store):
        """No gradient, no movement."""
        before = store.snapshot()
        adam_step(store, {"head": np.zeros(3)}, lr=0.1)
        assert np.array_equal(store["head"].values, before["head"])

    def test_accumulate(self):
        """Running totals add gradients entry by entry."""
        total = accumulate(None, {"a": np.ones(2)})
        total = accumulate(total, {"a": np.full(2, 2.0)})
        assert np.array_equal(total["a"], np.full(2, 3.0))


class TestCheckpoint:
    def test_round_trip(self, store, tmp_path):
        """Values, moments and the step survive a save and load."""
        grads = {name: np.ones_like(v) for name, v in store.snapshot().items()}
        adam_step(store, grads, lr=0.01)
        path = tmp_path / "model.ckpt"
        dump_checkpoint(path, store, {"note": "x"})

        fresh = ParameterStore(seed=99)
        fresh.linear("enc", 4, 3, "theta")
        fresh.uniform("head", (3,), 3, "phi")
        data = read_checkpoint(path)
        load_into(fresh, data)
        assert data["meta"] == {"note": "x"}
        assert fresh.step == 1
        for name in store:
            assert np.array_equal(fresh[name].values, store[name].values)
            assert np.array_equal(
                fresh.second_moment[name], store.second_moment[name]
            )

    def test_bytes_are_stable(self, store, tmp_path):
        """Saving the same store twice writes the same bytes."""
        a = dump_checkpoint(tmp_path / "a.ckpt", store, {})
        b = dump_checkpoint(tmp_path / "b.ckpt", store, {})
        assert a == b

    def test_bad_headers(self, tmp_path):
        """Foreign or damaged files are rejected."""
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "missing.ckpt")
        cases = {
            "junk": b"\xc1\xc1\xc1",
            "foreign": msgpack.packb({"format": "other"}),
            "future": msgpack.packb(
                {"format": CHECKPOINT_FORMAT, "version": 99}
            ),
        }
        for name, payload in cases.items():
            path = tmp_path / f"{name}.ckpt"
            path.write_bytes(payload)
            with pytest.raises(CheckpointError):
                read_checkpoint(path)

    def test_parameter_mismatch(self, store, tmp_path):
        """A checkpoint of another architecture does not load."""
        path = tmp_path / "model.ckpt"
        dump_checkpoint(path, store, {})
        other = ParameterStore()
        other.uniform("head", (3,), 3, "phi")
        with pytest.raises(CheckpointError):
            load_into(other, read_checkpoint(path))
