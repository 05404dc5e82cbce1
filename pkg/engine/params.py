"""Named parameters, the Adam optimizer and the checkpoint codec."""
import logging
import math
from pathlib import Path
from typing import Iterator, Optional, Union

import msgpack
import numpy as np

from common.errors import CheckpointError, DataError

from .tape import Tensor

logger = logging.getLogger("gsnp.params")

CHECKPOINT_FORMAT = "gsnp-checkpoint"
CHECKPOINT_VERSION = 1

# Encoder (theta), predictor/decoder (phi) and extractor (psi) parameters.
GROUPS = ("theta", "phi", "psi")


class ParameterStore:
    """Trainable tensors grouped by owner, with their optimizer state."""

    def __init__(self, seed: int = 0):
        """Create an empty store; ``seed`` drives initialization."""
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        self.step = 0
        self._init_rng = np.random.default_rng(seed)

    def add(self, name: str, values: np.ndarray, group: str) -> Tensor:
        """Register a parameter under a unique name."""
        if name in self._params:
            raise DataError(f"parameter {name!r} is already registered")
        if group not in GROUPS:
            raise DataError(f"unknown parameter group {group!r}")
        tensor = Tensor(values, requires_grad=True, name=name)
        self._params[name] = tensor
        self._groups[name] = group
        self.first_moment[name] = np.zeros_like(tensor.values)
        self.second_moment[name] = np.zeros_like(tensor.values)
        return tensor

    def uniform(
        self, name: str, shape: tuple[int, ...], fan_in: int, group: str
    ) -> Tensor:
        """Register a parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        bound = 1.0 / math.sqrt(fan_in)
        values = self._init_rng.uniform(-bound, bound, size=shape)
        return self.add(name, values, group)

    def linear(
        self, name: str, fan_in: int, fan_out: int, group: str
    ) -> tuple[Tensor, Tensor]:
        """Register the weight and bias of a linear map."""
        weight = self.uniform(f"{name}.W", (fan_in, fan_out), fan_in, group)
        bias = self.uniform(f"{name}.b", (fan_out,), fan_in, group)
        return weight, bias

    def __getitem__(self, name: str) -> Tensor:
        """Look a parameter up by name."""
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        """Whether a parameter is registered."""
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        """Parameter names in registration order."""
        return iter(self._params)

    def __len__(self) -> int:
        """Number of parameters."""
        return len(self._params)

    def group(self, name: str) -> str:
        """Owner group of a parameter."""
        return self._groups[name]

    def names(self, group: Optional[str] = None) -> list[str]:
        """Parameter names, optionally restricted to one group."""
        return [n for n in self._params if group in (None, self._groups[n])]

    def size(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.values.size for p in self._params.values())

    def gradients(
        self, grads: dict[Tensor, np.ndarray]
    ) -> dict[str, np.ndarray]:
        """Pick the parameter entries out of a tape's gradient map."""
        return {
            name: np.array(grads.get(p, np.zeros_like(p.values)))
            for name, p in self._params.items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy the current values."""
        return {name: p.values.copy() for name, p in self._params.items()}

    def restore(self, values: dict[str, np.ndarray]):
        """Overwrite values from a snapshot."""
        for name, array in values.items():
            param = self._params[name]
            if param.shape != array.shape:
                raise CheckpointError(
                    f"{name}: stored shape {array.shape} does not match "
                    f"{param.shape}"
                )
            param.values = np.array(array, dtype=np.float64)


def accumulate(
    total: Optional[dict[str, np.ndarray]], grads: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Add one gradient map into a running total."""
    if total is None:
        return {name: g.copy() for name, g in grads.items()}
    for name, g in grads.items():
        total[name] = total[name] + g
    return total


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    lr: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """Apply one bias-corrected Adam update in place."""
    store.step += 1
    t = store.step
    for name, g in grads.items():
        m = beta1 * store.first_moment[name] + (1 - beta1) * g
        v = beta2 * store.second_moment[name] + (1 - beta2) * g * g
        store.first_moment[name], store.second_moment[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        param = store[name]
        # Replace rather than mutate so readers of old values are unaffected.
        param.values = param.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def _pack_array(array: np.ndarray) -> dict:
    array = np.ascontiguousarray(array, dtype="<f8")
    return {"shape": list(array.shape), "data": array.tobytes()}


def _unpack_array(item: dict) -> np.ndarray:
    flat = np.frombuffer(item["data"], dtype="<f8")
    return flat.reshape(item["shape"]).astype(np.float64)


def dump_checkpoint(
    path: Union[str, Path], store: ParameterStore, meta: dict
) -> bytes:
    """Write a store and its metadata as a msgpack checkpoint."""
    data = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": store.step,
        "meta": meta,
        "params": {
            name: {"group": store.group(name), **_pack_array(store[name].values)}
            for name in store
        },
        "moments": {
            name: {
                "m": _pack_array(store.first_moment[name]),
                "v": _pack_array(store.second_moment[name]),
            }
            for name in store
        },
    }
    packed = msgpack.packb(data, use_bin_type=True)
    with open(path, "wb") as f:
        f.write(packed)
    logger.info(f"Wrote checkpoint {path} at step {store.step}.")
    return packed


def read_checkpoint(path: Union[str, Path]) -> dict:
    """Unpack a checkpoint and check its header."""
    try:
        with open(path, "rb") as f:
            data = msgpack.unpackb(f.read(), raw=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    except (ValueError, msgpack.UnpackException) as e:
        raise CheckpointError(f"checkpoint {path} is unreadable ({e})") from None
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {data.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return data


def load_into(store: ParameterStore, data: dict):
    """Restore parameter values, moments and the step counter."""
    missing = sorted(set(store) ^ set(data["params"]))
    if missing:
        raise CheckpointError(
            f"checkpoint parameters do not match the model: {missing}"
        )
    store.restore(
        {name: _unpack_array(item) for name, item in data["params"].items()}
    )
    for name, item in data["moments"].items():
        store.first_moment[name] = _unpack_array(item["m"])
        store.second_moment[name] = _unpack_array(item["v"])
    store.step = int(data["step"])
