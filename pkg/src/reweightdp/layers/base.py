"""Layer wrappers, the per-layer forward cache, and model containers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..autograd import GradMap, Tape, Var
from ..errors import CapabilityError, ContractError, DimensionError


@dataclass
class LayerCache:
    """Values retained by one forward pass.

    ``X`` is the layer input (a value), ``Z`` the pre-activation node(s) whose
    gradients the tape reports, ``aux`` anything else a closed form needs.
    """

    X: object = None
    Z: object = None
    aux: dict = field(default_factory=dict)


class Layer:
    """Base class for every layer.

    A layer holds its parameters in ``self.params`` (name -> float64 array).
    Layers with parameters implement :meth:`pe_grads`; the default
    :meth:`pe_sqnorms` sums squared norms of the materialized per-example
    gradients.
    """

    has_params = False

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.cache: LayerCache | None = None

    def __call__(self, tape: Tape, x: Var, cache: bool = True) -> Var:
        return self.forward(tape, x, cache)

    def forward(self, tape: Tape, x: Var, cache: bool = True) -> Var:
        raise NotImplementedError

    def reset(self) -> None:
        self.cache = None

    def _param(self, tape: Tape, key: str) -> Var:
        return tape.param(f"{self.name}.{key}", self.params[key])

    def _require_cache(self) -> LayerCache:
        if self.cache is None:
            raise ContractError(f"layer {self.name!r} has no cached forward pass")
        return self.cache

    def pe_grads(self, grads: GradMap) -> dict[str, np.ndarray]:
        """Per-example parameter gradients keyed by full parameter name."""
        if self.has_params:
            raise CapabilityError(f"layer {self.name!r} ({type(self).__name__}) cannot compute "
                                  "per-example gradients")
        return {}

    def pe_sqnorms(self, grads: GradMap) -> np.ndarray | None:
        pe = self.pe_grads(grads)
        if not pe:
            return None
        return sum(T.sq_norm_rows(g) for g in pe.values())


def _pe_capable(layer: Layer) -> bool:
    return not layer.has_params or type(layer).pe_grads is not Layer.pe_grads


class Model:
    """A network: parameter-bearing layers in ``self.layers`` plus a forward rule.

    Subclasses implement :meth:`logits`.  Inputs are raw numpy arrays; the
    model lifts them onto the tape.
    """

    def __init__(self, layers):
        self.layers: list[Layer] = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate layer names: {names}")

    def logits(self, tape: Tape, x: np.ndarray, cache: bool = True) -> Var:
        raise NotImplementedError

    def losses(self, tape: Tape, x: np.ndarray, y: np.ndarray, cache: bool = True) -> Var:
        """Per-example cross-entropy losses, a ``[t]`` node."""
        from ..autograd import cross_entropy

        return cross_entropy(self.logits(tape, x, cache), y)

    def reset(self) -> None:
        for layer in self.layers:
            layer.reset()

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.params.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def check_per_example(self) -> None:
        for layer in self.layers:
            if not _pe_capable(layer):
                raise CapabilityError(f"layer {layer.name!r} ({type(layer).__name__}) does not "
                                      "support per-example gradient norms")

    def pe_sqnorms(self, grads: GradMap) -> np.ndarray:
        """Squared per-example gradient norms over all parameters, accumulated layer by layer."""
        total = None
        for layer in self.layers:
            sq = layer.pe_sqnorms(grads)
            if sq is not None:
                total = sq if total is None else total + sq
        if total is None:
            raise CapabilityError("model has no parameters")
        return total

    def pe_layer_sqnorms(self, grads: GradMap) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            sq = layer.pe_sqnorms(grads)
            if sq is not None:
                out[layer.name] = sq
        return out

    def pe_grads(self, grads: GradMap) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.pe_grads(grads))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        for layer in self.layers:
            for k, v in layer.params.items():
                new = np.asarray(state[f"{layer.name}.{k}"], dtype=T.DTYPE)
                if new.shape != v.shape:
                    raise DimensionError(f"{layer.name}.{k}: expected {v.shape}, got {new.shape}")
                layer.params[k] = new.copy()

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}


class Sequential(Model):
    """A plain stack of layers, applied in order."""

    def __init__(self, layers):
        self.stack = list(layers)
        super().__init__([layer for layer in self.stack if layer.has_params])

    def reset(self) -> None:
        for layer in self.stack:
            layer.reset()

    def logits(self, tape: Tape, x: np.ndarray, cache: bool = True) -> Var:
        h = tape.input(x)
        for layer in self.stack:
            h = layer(tape, h, cache)
        return h


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()]) if params else np.zeros(0)


# ---------------------------------------------------------------- serialization


def save_params(params: dict[str, np.ndarray], directory) -> Path:
    """Write each tensor as raw little-endian float64 plus a ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, (name, value) in enumerate(params.items()):
        fname = f"{i:03d}.bin"
        np.asarray(value, dtype="<f8").tofile(directory / fname)
        manifest.append({"name": name, "shape": list(value.shape), "file": fname})
    path = directory / "manifest.json"
    path.write_text(json.dumps({"dtype": "float64-le", "tensors": manifest}, indent=2))
    return path


def load_params(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for entry in manifest["tensors"]:
        raw = np.fromfile(directory / entry["file"], dtype="<f8")
        shape = tuple(entry["shape"])
        if raw.size != int(np.prod(shape)):
            raise DimensionError(f"{entry['name']}: {raw.size} values for shape {shape}")
        out[entry["name"]] = raw.astype(T.DTYPE).reshape(shape)
    return out
