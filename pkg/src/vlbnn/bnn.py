"""Mean-field Gaussian feed-forward networks.

Each parameter array carries a posterior mean ``mu`` and a log standard
deviation ``log_sigma`` (both trainable), plus a fixed prior standard
deviation.  Weight sampling uses the reparameterization w = mu + sigma * eps
so gradients reach both halves; test-time prediction always runs the network
at the means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import GroupTag

__all__ = [
    "Batch",
    "MLPSpec",
    "PriorScheme",
    "GaussianParam",
    "BNNModel",
    "init_model",
    "sample_weights",
    "forward",
    "forward_mean",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_SIGMA_INIT_OFFSET = -3.0  # log sigma starts this far below log prior_std


@dataclass
class Batch:
    """Inputs (n, d) and integer class labels (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"Batch: need x (n, d) and y (n,), got {self.x.shape} and {self.y.shape}"
            )

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths from input to logits; softplus between, none after."""

    layer_widths: tuple

    def __init__(self, layer_widths):
        widths = tuple(int(w) for w in layer_widths)
        if len(widths) < 3:
            raise ValueError("MLPSpec: need input, at least one hidden, and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"MLPSpec: widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class PriorScheme:
    """Prior standard deviations per array kind.

    ``weight_std="fan-in"`` gives s = 1/sqrt(fan_in), which keeps the implied
    weight decay scale stable across widths; a float fixes s directly.
    ``c_init`` scales the variance of the mean initialization relative to the
    prior variance.
    """

    weight_std: float | str = "fan-in"
    bias_std: float = 1.0
    c_init: float = 1.0

    def weight_prior_std(self, fan_in: int) -> float:
        if self.weight_std == "fan-in":
            return 1.0 / float(np.sqrt(fan_in))
        return float(self.weight_std)


class GaussianParam:
    """One parameter array's posterior (mu, log_sigma) and prior std."""

    def __init__(self, name: str, mu: np.ndarray, log_sigma: np.ndarray, prior_std: float):
        if prior_std <= 0:
            raise ValueError(f"GaussianParam {name}: prior_std must be positive")
        mu = np.asarray(mu, dtype=np.float64)
        log_sigma = np.asarray(log_sigma, dtype=np.float64)
        if mu.shape != log_sigma.shape:
            raise ValueError(
                f"GaussianParam {name}: mu {mu.shape} and log_sigma {log_sigma.shape} differ"
            )
        self.name = name
        self.mu = ad.leaf(mu)
        self.log_sigma = ad.leaf(log_sigma)
        self.prior_std = float(prior_std)

    @property
    def shape(self) -> tuple:
        return self.mu.shape

    @property
    def size(self) -> int:
        return self.mu.data.size

    def sigma(self) -> Tensor:
        return ad.exp(self.log_sigma)

    def sigma2(self) -> Tensor:
        return ad.exp(ad.scalar_mul(self.log_sigma, 2.0))

    def tagged_leaves(self) -> list[tuple[Tensor, GroupTag]]:
        """Trainable leaves with their optimizer group tags."""
        return [(self.mu, GroupTag.MEAN_LIKE), (self.log_sigma, GroupTag.VARIANCE_LIKE)]


class BNNModel:
    """Softplus MLP with a GaussianParam per weight matrix and bias vector."""

    def __init__(self, spec: MLPSpec, params: list[GaussianParam],
                 prior: PriorScheme, seed: int):
        widths = spec.layer_widths
        expected = []
        for i in range(len(widths) - 1):
            expected.append((widths[i], widths[i + 1]))
            expected.append((widths[i + 1],))
        got = [p.shape for p in params]
        if got != expected:
            raise ValueError(f"BNNModel: parameter shapes {got} do not match spec {expected}")
        self.spec = spec
        self.params = params
        self.prior = prior
        self.seed = int(seed)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def mu_leaves(self) -> list[Tensor]:
        return [p.mu for p in self.params]

    def log_sigma_leaves(self) -> list[Tensor]:
        return [p.log_sigma for p in self.params]

    def tagged_leaves(self) -> list[tuple[Tensor, GroupTag]]:
        out = []
        for p in self.params:
            out.extend(p.tagged_leaves())
        return out

    def forward(self, x, weights: list[Tensor] | None = None) -> Tensor:
        """Logits for a (batch, n_in) input; ``weights=None`` runs at the means."""
        xt = ad.as_tensor(x)
        if xt.data.ndim != 2 or xt.shape[1] != self.spec.n_in:
            raise ValueError(
                f"forward: input shape {xt.shape} does not match n_in={self.spec.n_in}"
            )
        if weights is None:
            weights = self.mu_leaves()
        if len(weights) != len(self.params):
            raise ValueError(
                f"forward: expected {len(self.params)} weight tensors, got {len(weights)}"
            )
        h = xt
        n_layers = len(self.spec.layer_widths) - 1
        for i in range(n_layers):
            w, b = weights[2 * i], weights[2 * i + 1]
            h = ad.add(ad.matmul(h, w), b)
            if i < n_layers - 1:
                h = ad.softplus(h)
        return h

    def log_lik(self, batch: Batch, weights: list[Tensor] | None = None) -> Tensor:
        """Total log-likelihood of the batch labels (summed, unscaled)."""
        logits = self.forward(batch.x, weights)
        return ad.scalar_mul(ad.gather_nll(logits, batch.y).sum(), -1.0)


def init_model(spec: MLPSpec, prior: PriorScheme | None = None, seed: int = 0) -> BNNModel:
    """Fresh model: mu ~ N(0, c_init * s^2), log_sigma = log(s) - 3."""
    prior = prior or PriorScheme()
    rng = np.random.default_rng(seed)
    params: list[GaussianParam] = []
    widths = spec.layer_widths
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        s_w = prior.weight_prior_std(fan_in)
        s_b = float(prior.bias_std)
        mu_w = rng.normal(0.0, s_w * np.sqrt(prior.c_init), size=(fan_in, fan_out))
        mu_b = rng.normal(0.0, s_b * np.sqrt(prior.c_init), size=(fan_out,))
        params.append(GaussianParam(
            f"w{i}", mu_w, np.full((fan_in, fan_out), np.log(s_w) + LOG_SIGMA_INIT_OFFSET), s_w))
        params.append(GaussianParam(
            f"b{i}", mu_b, np.full((fan_out,), np.log(s_b) + LOG_SIGMA_INIT_OFFSET), s_b))
    return BNNModel(spec, params, prior, seed)


def sample_weights(model: BNNModel, eps: list) -> list[Tensor]:
    """Reparameterized draw w = mu + exp(log_sigma) * eps, one tensor per array."""
    if len(eps) != len(model.params):
        raise ValueError(f"sample_weights: expected {len(model.params)} noise arrays")
    out = []
    for p, e in zip(model.params, eps):
        et = ad.as_tensor(e)
        if et.shape != p.shape:
            raise ValueError(
                f"sample_weights: noise shape {et.shape} does not match {p.name} {p.shape}"
            )
        out.append(ad.add(p.mu, ad.mul(p.sigma(), et)))
    return out


def forward(model: BNNModel, x, weights: list[Tensor] | None = None) -> Tensor:
    return model.forward(x, weights)


def forward_mean(model: BNNModel, x) -> Tensor:
    """Logits at the posterior means; the test-time predictive network."""
    return model.forward(x, None)


# -- checkpoint container: one-line JSON header, then little-endian f64 payload


def _header_dict(model: BNNModel) -> dict:
    arrays = []
    offset = 0
    for p in model.params:
        nbytes = p.size * 8
        arrays.append({
            "name": p.name,
            "shape": list(p.shape),
            "prior_std": p.prior_std,
            "mu_offset": offset,
            "log_sigma_offset": offset + nbytes,
        })
        offset += 2 * nbytes
    return {
        "format": "vlbnn-checkpoint",
        "version": 1,
        "layer_widths": list(model.spec.layer_widths),
        "prior": {
            "weight_std": model.prior.weight_std,
            "bias_std": model.prior.bias_std,
            "c_init": model.prior.c_init,
        },
        "seed": model.seed,
        "payload_bytes": offset,
        "arrays": arrays,
    }


def save_checkpoint(model: BNNModel, path) -> None:
    header = json.dumps(_header_dict(model), sort_keys=True, separators=(",", ":"))
    chunks = [header.encode("utf-8"), b"\n"]
    for p in model.params:
        chunks.append(np.ascontiguousarray(p.mu.data, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(p.log_sigma.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> BNNModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"checkpoint {path}: missing header line")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != "vlbnn-checkpoint":
        raise ValueError(f"checkpoint {path}: unrecognized format field")
    payload = raw[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise ValueError(
            f"checkpoint {path}: payload is {len(payload)} bytes, "
            f"header promises {header['payload_bytes']}"
        )
    params = []
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        mu = np.frombuffer(payload, "<f8", count, entry["mu_offset"]).reshape(shape)
        ls = np.frombuffer(payload, "<f8", count, entry["log_sigma_offset"]).reshape(shape)
        params.append(GaussianParam(entry["name"], mu.copy(), ls.copy(), entry["prior_std"]))
    prior = PriorScheme(
        weight_std=header["prior"]["weight_std"],
        bias_std=header["prior"]["bias_std"],
        c_init=header["prior"]["c_init"],
    )
    return BNNModel(MLPSpec(header["layer_widths"]), params, prior, header["seed"])
