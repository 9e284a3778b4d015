"""Conditional flow models: likelihood evaluation, sampling, the default
architecture builder, and model (de)serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import MlpSpec, Node, ParamStore, ShapeError, Tape, backward, load_params, save_params
from .layers import CouplingLayer, FunnelLayer, NonFiniteError, PermutationLayer

Layer = CouplingLayer | PermutationLayer | FunnelLayer


def _layer_in_dim(layer: Layer) -> int:
    return layer.in_dim if isinstance(layer, FunnelLayer) else layer.dim


def _layer_out_dim(layer: Layer) -> int:
    return layer.out_dim if isinstance(layer, FunnelLayer) else layer.dim


@dataclass
class FlowModel:
    """A stack of layers applied data-side first, a standard-normal base
    of width ``base_dim``, and the flat parameter store."""

    layers: list[Layer]
    base_dim: int
    cond_dim: int
    params: ParamStore

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        width = self.data_dim
        for layer in self.layers:
            if _layer_in_dim(layer) != width:
                raise ShapeError(
                    f"layer {layer.name} expects width {_layer_in_dim(layer)}, chain carries {width}",
                    tensor=layer.name,
                )
            width = _layer_out_dim(layer)
        if width != self.base_dim:
            raise ShapeError(f"chain ends at width {width}, base_dim is {self.base_dim}")

    @property
    def data_dim(self) -> int:
        return _layer_in_dim(self.layers[0])

    @property
    def n_bijective(self) -> int:
        return sum(1 for l in self.layers if not isinstance(l, FunnelLayer))

    @property
    def n_surjective(self) -> int:
        return sum(1 for l in self.layers if isinstance(l, FunnelLayer))


def _as_batch(arr, width: int, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"{what} must have {width} columns, got shape {arr.shape}", tensor=what)
    return arr


def flow_loglik(model: FlowModel, y, theta, tape: Tape) -> Node:
    """Conditional log-likelihood as a Node of shape (B,).

    Accumulates the base log-density plus every bijective log-Jacobian
    and every funnel contribution, walking layers data-side first.
    """
    yb = _as_batch(y, model.data_dim, "y")
    tb = _as_batch(theta, model.cond_dim, "theta")
    if yb.shape[0] != tb.shape[0]:
        raise ShapeError(f"{yb.shape[0]} observations but {tb.shape[0]} condition rows")
    u = tape.constant(yb)
    th = tape.constant(tb)
    total = None
    for k, layer in enumerate(model.layers):
        u, term = layer.normalize(u, th, model.params, tape)
        if not np.all(np.isfinite(u.value)):
            raise NonFiniteError("non-finite state", layer=f"layer {k} ({layer.name})")
        if term is not None:
            total = term if total is None else tape.add(total, term)
    base = tape.gaussian_logpdf(u, 0.0, 0.0)
    return base if total is None else tape.add(total, base)


def log_prob(model: FlowModel, y, theta):
    """Convenience wrapper: plain log-likelihood values without a caller tape.

    Returns a float for a single (y, theta) pair, else an array of shape (B,).
    """
    single = np.asarray(y).ndim == 1
    node = flow_loglik(model, y, theta, Tape())
    return float(node.value[0]) if single else node.value.copy()


def loglik_grad(model: FlowModel, y, theta) -> np.ndarray:
    """Gradient of the summed log-likelihood w.r.t. the flat parameters."""
    tape = Tape()
    node = flow_loglik(model, y, theta, tape)
    model.params.zero_grads()
    backward(tape, np.ones(node.value.shape), root=node)
    return model.params.grads.copy()


def _sample_rows(model: FlowModel, thetas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per conditioning row; thetas has shape (n, cond_dim)."""
    u = rng.standard_normal((thetas.shape[0], model.base_dim))
    for layer in reversed(model.layers):
        if isinstance(layer, FunnelLayer):
            u = layer.generate(u, thetas, model.params, rng)
        else:
            u = layer.generate(u, thetas, model.params)
    return u


def flow_sample(model: FlowModel, theta, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_samples`` series conditioned on one parameter vector."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.cond_dim,):
        raise ShapeError(f"theta must have shape ({model.cond_dim},), got {theta.shape}", tensor="theta")
    thetas = np.broadcast_to(theta, (n_samples, model.cond_dim))
    return _sample_rows(model, thetas, rng)


def initialize_params(model: FlowModel, seed: int) -> None:
    """Redraw every parameter tensor with the model's init scheme."""
    rng = np.random.default_rng(seed)
    fresh = ParamStore()
    for layer in model.layers:
        layer.init_params(fresh, rng)
    model.params.restore(fresh.values)


def build_default_model(
    data_dim: int,
    latent_dim: int,
    cond_dim: int,
    seed: int,
    hidden: tuple[int, ...] = (64, 64),
    clamp: float = 2.0,
    n_pre: int = 4,
    n_post: int = 2,
) -> FlowModel:
    """Default architecture: ``n_pre`` couplings at full width, one funnel
    down to ``latent_dim``, then ``n_post`` couplings at the reduced width.

    Coupling masks alternate parity; the funnel keeps a seed-chosen
    random index subset, which plays the role of a fixed permutation.
    Conditioners use tanh hidden layers and zero-initialized final
    layers, so the whole model starts at the identity.
    """
    if not 0 < latent_dim < data_dim:
        raise ShapeError(f"need 0 < latent_dim < data_dim, got {latent_dim} of {data_dim}")
    if cond_dim < 1:
        raise ShapeError("cond_dim must be at least 1")
    if data_dim < 2 or (n_post > 0 and latent_dim < 2):
        raise ShapeError("coupling blocks need width of at least 2")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []

    def coupling(idx: int, width: int, parity: int) -> CouplingLayer:
        mask = (np.arange(width) % 2) == parity
        n_t = int(mask.sum())
        spec = MlpSpec(
            name=f"coupling_{idx}.cond",
            input_dim=(width - n_t) + cond_dim,
            hidden_dims=hidden,
            output_dim=2 * n_t,
            activation="tanh",
            final_zero_init=True,
        )
        return CouplingLayer(name=f"coupling_{idx}", dim=width, mask=mask, conditioner=spec, clamp=clamp)

    for i in range(n_pre):
        layers.append(coupling(i, data_dim, i % 2))

    keep_idx = np.sort(rng.choice(data_dim, size=latent_dim, replace=False))
    n_drop = data_dim - latent_dim
    layers.append(
        FunnelLayer(
            name="funnel",
            in_dim=data_dim,
            out_dim=latent_dim,
            keep_idx=keep_idx,
            kept_conditioner=MlpSpec(
                name="funnel.kept",
                input_dim=n_drop + cond_dim,
                hidden_dims=hidden,
                output_dim=2 * latent_dim,
                activation="tanh",
                final_zero_init=True,
            ),
            decoder=MlpSpec(
                name="funnel.dec",
                input_dim=latent_dim + cond_dim,
                hidden_dims=hidden,
                output_dim=2 * n_drop,
                activation="tanh",
                final_zero_init=True,
            ),
            clamp=clamp,
        )
    )

    for i in range(n_post):
        layers.append(coupling(n_pre + i, latent_dim, i % 2))

    params = ParamStore()
    for layer in layers:
        layer.init_params(params, rng)
    return FlowModel(layers=layers, base_dim=latent_dim, cond_dim=cond_dim, params=params)


# ---------------------------------------------------------------------------
# serialization


def _layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, CouplingLayer):
        return {
            "type": "coupling",
            "name": layer.name,
            "dim": layer.dim,
            "mask": layer.mask.astype(int).tolist(),
            "conditioner": layer.conditioner.to_dict(),
            "clamp": layer.clamp,
        }
    if isinstance(layer, PermutationLayer):
        return {"type": "permutation", "name": layer.name, "dim": layer.dim, "perm": layer.perm.tolist()}
    if isinstance(layer, FunnelLayer):
        return {
            "type": "funnel",
            "name": layer.name,
            "in_dim": layer.in_dim,
            "out_dim": layer.out_dim,
            "keep_idx": layer.keep_idx.tolist(),
            "kept_conditioner": layer.kept_conditioner.to_dict(),
            "decoder": layer.decoder.to_dict(),
            "clamp": layer.clamp,
            "log_std_bound": layer.log_std_bound,
        }
    raise TypeError(f"unknown layer type {type(layer)!r}")


def _layer_from_dict(d: dict) -> Layer:
    kind = d["type"]
    if kind == "coupling":
        return CouplingLayer(
            name=d["name"],
            dim=int(d["dim"]),
            mask=np.asarray(d["mask"], dtype=bool),
            conditioner=MlpSpec.from_dict(d["conditioner"]),
            clamp=float(d["clamp"]),
        )
    if kind == "permutation":
        return PermutationLayer(name=d["name"], dim=int(d["dim"]), perm=np.asarray(d["perm"]))
    if kind == "funnel":
        return FunnelLayer(
            name=d["name"],
            in_dim=int(d["in_dim"]),
            out_dim=int(d["out_dim"]),
            keep_idx=np.asarray(d["keep_idx"]),
            kept_conditioner=MlpSpec.from_dict(d["kept_conditioner"]),
            decoder=MlpSpec.from_dict(d["decoder"]),
            clamp=float(d["clamp"]),
            log_std_bound=float(d["log_std_bound"]),
        )
    raise ValueError(f"unknown layer type {kind!r}")


def model_to_dict(model: FlowModel) -> dict:
    return {
        "base_dim": model.base_dim,
        "cond_dim": model.cond_dim,
        "layers": [_layer_to_dict(l) for l in model.layers],
    }


def model_from_dict(arch: dict, params: ParamStore) -> FlowModel:
    layers = [_layer_from_dict(d) for d in arch["layers"]]
    return FlowModel(layers=layers, base_dim=int(arch["base_dim"]), cond_dim=int(arch["cond_dim"]), params=params)


def save_model(model: FlowModel, prefix) -> None:
    """Write ``{prefix}.arch.json`` and ``{prefix}.params.bin``."""
    prefix = str(prefix)
    with open(prefix + ".arch.json", "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_params(model.params, prefix + ".params.bin")


def load_model(prefix) -> FlowModel:
    """Reload a model saved by :func:`save_model`; parameters are bit-exact."""
    prefix = str(prefix)
    with open(prefix + ".arch.json") as fh:
        arch = json.load(fh)
    params = load_params(prefix + ".params.bin")
    return model_from_dict(arch, params)
