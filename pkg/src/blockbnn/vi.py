"""Variational inference: priors, posteriors, the ELBO, training, prediction.

The objective is the evidence lower bound

    ELBO = sum_i E_q log p(y_i | f_i) - KL(q(V) || p(V)),

estimated doubly stochastically: the sum over data by mini-batches (rescaled
by n/|batch|) and the expectation by Monte Carlo draws of the weights, which
are reparameterized as v = mu + Sigma^{1/2} eps so gradients reach the
variational parameters. Both approximations are unbiased.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import blocks as bl
from .autodiff import NonFiniteValue, Tape, value_of
from .rngs import stream


class UnsupportedCombination(ValueError):
    """Raised for posterior/prior pairs without a supported KL form."""


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the step and term."""

    def __init__(self, step: int, term: str):
        super().__init__(f"training diverged at step {step}: non-finite {term}")
        self.step = step
        self.term = term


@dataclass(frozen=True)
class Prior:
    """Weight-group prior: standard normal, or the group-lasso Laplace form
    exp(-lam * sum_g ||v_g||_2) with one group per incoming unit by default."""

    kind: str = "normal"             # "normal" | "group_lasso"
    lam: float = 0.0
    groups: tuple[tuple[int, ...], ...] | None = None  # row-index groups


@dataclass(frozen=True)
class GroupPosterior:
    """Variational family for one FB weight matrix (in_width x out_width)."""

    family: str                      # "gaussian" | "pointmass" | "mixture"
    in_width: int
    out_width: int
    keep_prob: float = 1.0
    full_cov: bool = False
    skip_mask_rows: tuple[int, ...] = ()  # rows never dropped (bias column)


@dataclass
class VariationalState:
    """Posterior structure plus the flat parameter store the optimizer sees."""

    posteriors: dict[str, GroupPosterior]
    priors: dict[str, Prior]
    params: dict[str, np.ndarray]


@dataclass(frozen=True)
class GaussianRegression:
    """y_i | f_i ~ N(f_i, noise_var); the variance trains through its log."""

    trainable: bool = True
    init_var: float = 1.0

    def __post_init__(self):
        if self.init_var <= 0.0:
            raise ValueError("noise variance must be positive")

    def param_init(self) -> dict[str, np.ndarray]:
        if self.trainable:
            return {"noise.log_var": np.array([[math.log(self.init_var)]])}
        return {}

    def log_prob_sum(self, f, y, params):
        y = ad.as_matrix(y)
        n = y.shape[0]
        if self.trainable:
            log_var = params["noise.log_var"]
        else:
            log_var = np.array([[math.log(self.init_var)]])
        sse = ad.total_sum(ad.square(ad.sub(f, y)))
        quad = ad.scale(ad.mul(sse, ad.exp(ad.neg(log_var))), -0.5)
        norm = ad.scale(log_var, -0.5 * n)
        return ad.add(ad.add(quad, norm), np.array([[-0.5 * n * math.log(2.0 * np.pi)]]))


@dataclass(frozen=True)
class CategoricalSoftmax:
    """y_i in {0..k-1} with p(y_i | f_i) = softmax(f_i)[y_i]."""

    classes: int

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("softmax likelihood needs at least 2 classes")

    def param_init(self) -> dict[str, np.ndarray]:
        return {}

    def log_prob_sum(self, f, y, params):
        labels = np.asarray(y).astype(int).ravel()
        n = labels.size
        onehot = np.zeros((n, self.classes))
        onehot[np.arange(n), labels] = 1.0
        picked = ad.row_sum(ad.mul(f, onehot))
        return ad.total_sum(ad.sub(picked, ad.log_sum_exp(f)))


# ---------------------------------------------------------------------------
# State construction and weight sampling.
# ---------------------------------------------------------------------------

def init_state(net: bl.BayesNet, likelihood=None, seed: int = 0,
               init_std: float = 0.1) -> VariationalState:
    """Fresh variational state matching the net's recipes."""
    posteriors: dict[str, GroupPosterior] = {}
    priors: dict[str, Prior] = {}
    params: dict[str, np.ndarray] = {}
    for layer in net.units:
        for unit in layer:
            gid = unit.fb.group
            r, d = unit.fb.in_width, unit.fb.out_width
            rec = unit.recipe
            skip = (r - 1,) if unit.fb.bias else ()
            posteriors[gid] = GroupPosterior(
                family=rec.posterior, in_width=r, out_width=d,
                keep_prob=rec.keep_prob, full_cov=rec.full_cov,
                skip_mask_rows=skip)
            if rec.prior == "group_lasso":
                # the bias column, when present, carries no sparsity penalty
                groups = (tuple((i,) for i in range(r - 1)) if unit.fb.bias else None)
                priors[gid] = Prior(kind="group_lasso", lam=rec.lasso_lam, groups=groups)
            else:
                priors[gid] = Prior(kind="normal")
            params[f"{gid}.mu"] = (stream(seed, "init", gid).standard_normal((r, d))
                                   / np.sqrt(r))
            if rec.posterior == "gaussian":
                if rec.full_cov:
                    for k in range(d):
                        params[f"{gid}.factor{k}"] = init_std * np.eye(r)
                else:
                    params[f"{gid}.log_std"] = np.full((r, d), math.log(init_std))
    if likelihood is not None:
        params.update(likelihood.param_init())
    return VariationalState(posteriors=posteriors, priors=priors, params=params)


def sample_weights(state: VariationalState, rng: np.random.Generator,
                   params: dict | None = None) -> dict:
    """One reparameterized draw of every FB weight matrix.

    The draw order and count are independent of the parameter values, so a
    fixed generator state yields common random numbers across evaluations.
    """
    if params is None:
        params = state.params
    out = {}
    for gid, post in state.posteriors.items():
        mu = params[f"{gid}.mu"]
        if post.family == "pointmass":
            out[gid] = mu
        elif post.family == "mixture":
            keep = (rng.random(post.in_width) < post.keep_prob).astype(np.float64)
            for row in post.skip_mask_rows:
                keep[row] = 1.0
            mask = np.repeat(keep[:, None], post.out_width, axis=1)
            out[gid] = ad.mul(mu, mask)
        else:
            eps = rng.standard_normal((post.in_width, post.out_width))
            if post.full_cov:
                cols = []
                for k in range(post.out_width):
                    factor = params[f"{gid}.factor{k}"]
                    cols.append(ad.add(ad.select_cols(mu, [k]),
                                       ad.matmul(factor, eps[:, [k]])))
                out[gid] = cols[0] if len(cols) == 1 else ad.concat_cols(cols)
            else:
                out[gid] = ad.add(mu, ad.mul(ad.exp(params[f"{gid}.log_std"]), eps))
    return out


# ---------------------------------------------------------------------------
# KL(q || p) closed forms per supported family/prior pair.
# ---------------------------------------------------------------------------

def _group_rows(prior: Prior, in_width: int) -> list[list[int]]:
    if prior.groups is not None:
        return [list(g) for g in prior.groups]
    return [[i] for i in range(in_width)]


def _kl_traced(state: VariationalState, params: dict):
    total = np.zeros((1, 1))
    for gid, post in state.posteriors.items():
        prior = state.priors[gid]
        mu = params[f"{gid}.mu"]
        r, d = post.in_width, post.out_width
        if post.family == "gaussian":
            if prior.kind != "normal":
                raise UnsupportedCombination(
                    f"group {gid}: gaussian posterior with {prior.kind} prior")
            if post.full_cov:
                term = ad.scale(ad.total_sum(ad.square(mu)), 0.5)
                for k in range(d):
                    factor = params[f"{gid}.factor{k}"]
                    term = ad.add(term, ad.scale(ad.total_sum(ad.square(factor)), 0.5))
                    term = ad.sub(term, ad.logabsdet(factor))
                term = ad.add(term, np.array([[-0.5 * r * d]]))
            else:
                log_std = params[f"{gid}.log_std"]
                var = ad.exp(ad.scale(log_std, 2.0))
                term = ad.scale(ad.add(ad.total_sum(var), ad.total_sum(ad.square(mu))), 0.5)
                term = ad.sub(term, ad.total_sum(log_std))
                term = ad.add(term, np.array([[-0.5 * r * d]]))
        elif post.family == "pointmass":
            if prior.kind == "normal":
                # MAP convention: the negative log-prior up to constants
                term = ad.scale(ad.total_sum(ad.square(mu)), 0.5)
            elif prior.groups is None:
                # one group per incoming unit: sum of row norms
                term = ad.scale(ad.total_sum(ad.sqrt(ad.row_sum(ad.square(mu)))),
                                prior.lam)
            elif prior.groups == tuple((i,) for i in range(len(prior.groups))):
                # per-row groups over a leading prefix (rest unpenalized)
                m = len(prior.groups)
                prefix = ad.transpose(ad.select_cols(ad.transpose(ad.square(mu)),
                                                     list(range(m))))
                term = ad.scale(ad.total_sum(ad.sqrt(ad.row_sum(prefix))), prior.lam)
            else:
                sq = ad.square(mu)
                norms = []
                for rows in _group_rows(prior, r):
                    block = sq if len(rows) == r else ad.transpose(
                        ad.select_cols(ad.transpose(sq), rows))
                    norms.append(ad.sqrt(ad.total_sum(block)))
                term = ad.scale(ad.total_sum(ad.concat_cols(norms)), prior.lam)
        else:  # mixture
            if prior.kind != "normal":
                raise UnsupportedCombination(
                    f"group {gid}: mixture posterior with {prior.kind} prior")
            # dropout-as-VI approximation; the Bernoulli entropy is dropped
            term = ad.scale(ad.total_sum(ad.square(mu)), 0.5 * post.keep_prob)
        total = ad.add(total, term)
    return total


def kl_term(state: VariationalState) -> float:
    """KL(q || p) under the closed forms; zero iff q equals the Gaussian prior."""
    return float(value_of(_kl_traced(state, state.params))[0, 0])


# ---------------------------------------------------------------------------
# ELBO estimation.
# ---------------------------------------------------------------------------

def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng), "elbo")


def elbo_parts(net: bl.BayesNet, state: VariationalState, likelihood,
               x, y, n_total: int, mc_samples: int = 1, rng=0,
               params: dict | None = None):
    """(scaled expected log-likelihood, KL) as tape values."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    xv = ad.as_matrix(x)
    if xv.shape[0] == 0:
        raise ValueError("empty batch")
    gen = _as_rng(rng)
    if params is None:
        params = state.params
    total = None
    for _ in range(mc_samples):
        weights = sample_weights(state, gen, params)
        fout = bl.network_output(net, xv, weights)
        ll = likelihood.log_prob_sum(fout, y, params)
        total = ll if total is None else ad.add(total, ll)
    loglik = ad.scale(total, float(n_total) / (mc_samples * xv.shape[0]))
    return loglik, _kl_traced(state, params)


def elbo_estimate(net, state, likelihood, x, y, n_total: int,
                  mc_samples: int = 1, rng=0, params: dict | None = None):
    """Doubly stochastic ELBO estimate, traced when params hold tape leaves."""
    loglik, kl = elbo_parts(net, state, likelihood, x, y, n_total,
                            mc_samples=mc_samples, rng=rng, params=params)
    return ad.sub(loglik, kl)


# ---------------------------------------------------------------------------
# Optimizer and training loop.
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer over a flat dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for key, grad in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * grad
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * grad ** 2
            self.params[key] -= lr * (self.m[key] / b1t) / (
                np.sqrt(self.v[key] / b2t) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 100
    learning_rate: float = 0.01
    final_lr_fraction: float = 0.1  # exponential decay target by the last step
    mc_samples: int = 1
    seed: int = 0
    standardize_y: bool = False  # fit on (y - mean)/std, un-transform at prediction


@dataclass(frozen=True)
class TraceRow:
    step: int
    neg_elbo: float
    kl: float
    loglik: float


@dataclass
class TrainedModel:
    net: bl.BayesNet
    state: VariationalState
    likelihood: object
    config: TrainConfig = field(default_factory=TrainConfig)
    y_mean: float = 0.0
    y_scale: float = 1.0


def _data_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "x") and hasattr(data, "y"):
        return ad.as_matrix(data.x), np.asarray(data.y)
    x, y = data
    return ad.as_matrix(x), np.asarray(y)


def train(net: bl.BayesNet, state: VariationalState, likelihood, data,
          config: TrainConfig = TrainConfig()) -> tuple[TrainedModel, list[TraceRow]]:
    """Maximize the ELBO with mini-batch Adam; deterministic given the seed."""
    x, y = _data_arrays(data)
    y_mean, y_scale = 0.0, 1.0
    if config.standardize_y:
        if not isinstance(likelihood, GaussianRegression):
            raise ValueError("target standardization only applies to regression")
        if ad.as_matrix(y).shape[1] != 1:
            raise ValueError("target standardization needs a single output")
        y_mean = float(np.mean(y))
        y_scale = float(np.std(y))
        if y_scale == 0.0:
            raise ValueError("constant target cannot be standardized")
        y = (np.asarray(y, dtype=np.float64) - y_mean) / y_scale
    n = x.shape[0]
    bsz = min(config.batch_size, n)
    order_rng = stream(config.seed, "batches")
    noise_rng = stream(config.seed, "noise")
    adam = Adam(state.params)
    decay = config.final_lr_fraction ** (1.0 / max(config.steps - 1, 1))
    trace: list[TraceRow] = []
    perm, cursor = order_rng.permutation(n), 0
    for step in range(config.steps):
        if cursor + bsz > n:
            perm, cursor = order_rng.permutation(n), 0
        idx = perm[cursor:cursor + bsz]
        cursor += bsz
        tape = Tape()
        leaves = {name: tape.leaf(arr) for name, arr in state.params.items()}
        try:
            loglik, kl = elbo_parts(net, state, likelihood, x[idx], y[idx], n,
                                    mc_samples=config.mc_samples, rng=noise_rng,
                                    params=leaves)
            elbo = ad.sub(loglik, kl)
        except NonFiniteValue as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        ll_v, kl_v = float(loglik.value[0, 0]), float(kl.value[0, 0])
        if not np.isfinite(ll_v):
            raise TrainingDiverged(step, "log-likelihood")
        if not np.isfinite(kl_v):
            raise TrainingDiverged(step, "kl")
        names = list(leaves)
        grads = tape.gradient(elbo, [leaves[name] for name in names])
        lr = config.learning_rate * decay ** step
        adam.step({name: -g for name, g in zip(names, grads)}, lr)
        trace.append(TraceRow(step=step, neg_elbo=-(ll_v - kl_v), kl=kl_v, loglik=ll_v))
    return TrainedModel(net=net, state=state, likelihood=likelihood,
                        config=config, y_mean=y_mean, y_scale=y_scale), trace


def write_trace_csv(trace: list[TraceRow], path) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "neg_elbo", "kl", "loglik"])
        for row in trace:
            writer.writerow([row.step, repr(row.neg_elbo), repr(row.kl), repr(row.loglik)])


# ---------------------------------------------------------------------------
# Posterior prediction.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    var: np.ndarray        # epistemic spread across weight draws
    draws: np.ndarray      # (mc_samples, n) or (mc_samples, n, outputs)
    noise_var: float


def noise_variance(model: TrainedModel) -> float:
    """Likelihood noise variance on the original target scale."""
    lik = model.likelihood
    if isinstance(lik, GaussianRegression):
        raw = (float(np.exp(model.state.params["noise.log_var"][0, 0]))
               if lik.trainable else lik.init_var)
        return raw * model.y_scale ** 2
    return 0.0


def predict(model: TrainedModel, x, mc_samples: int = 100, seed: int = 0,
            include_noise: bool = False) -> Prediction:
    """Monte Carlo posterior predictive over weight draws.

    Draw s comes from the stream (seed, s), so the first draws are identical
    whatever mc_samples is, and draws can be evaluated in any order.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    xv = ad.as_matrix(x)
    draws = []
    for s in range(mc_samples):
        weights = sample_weights(model.state, stream(seed, "predict", s))
        out = value_of(bl.network_output(model.net, xv, weights))
        out = model.y_mean + model.y_scale * out
        draws.append(out[:, 0] if out.shape[1] == 1 else out)
    stack = np.stack(draws, axis=0)
    mean = stack.mean(axis=0)
    var = stack.var(axis=0)
    if include_noise:
        var = var + noise_variance(model)
    return Prediction(mean=mean, var=var, draws=stack,
                      noise_var=noise_variance(model))


# ---------------------------------------------------------------------------
# Model persistence: a JSON manifest plus one binary blob with a checksum.
# ---------------------------------------------------------------------------

def save_model(model: TrainedModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob: dict[str, np.ndarray] = {}
    for key, arr in bl.net_tensors(model.net).items():
        blob["net." + key] = arr
    for key, arr in model.state.params.items():
        blob["param." + key] = arr
    blob_path = directory / "weights.npz"
    np.savez(blob_path, **blob)
    digest = hashlib.sha256(blob_path.read_bytes()).hexdigest()
    lik = model.likelihood
    manifest = {
        "net": bl.net_config(model.net),
        "posteriors": {gid: {"family": p.family, "in_width": p.in_width,
                             "out_width": p.out_width, "keep_prob": p.keep_prob,
                             "full_cov": p.full_cov,
                             "skip_mask_rows": list(p.skip_mask_rows)}
                       for gid, p in model.state.posteriors.items()},
        "priors": {gid: {"kind": p.kind, "lam": p.lam,
                         "groups": [list(g) for g in p.groups] if p.groups else None}
                   for gid, p in model.state.priors.items()},
        "likelihood": ({"kind": "gaussian", "trainable": lik.trainable,
                        "init_var": lik.init_var}
                       if isinstance(lik, GaussianRegression)
                       else {"kind": "softmax", "classes": lik.classes}),
        "train_config": asdict(model.config),
        "y_mean": model.y_mean,
        "y_scale": model.y_scale,
        "blob_sha256": digest,
    }
    with open(directory / "model.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)


def load_model(directory) -> TrainedModel:
    directory = Path(directory)
    with open(directory / "model.json", "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    blob_path = directory / "weights.npz"
    digest = hashlib.sha256(blob_path.read_bytes()).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise ValueError("weight blob checksum mismatch; file corrupted or replaced")
    with np.load(blob_path) as blob:
        tensors = {k[len("net."):]: blob[k] for k in blob.files if k.startswith("net.")}
        params = {k[len("param."):]: blob[k] for k in blob.files if k.startswith("param.")}
    net = bl.rebuild_network(manifest["net"], tensors)
    posteriors = {gid: GroupPosterior(
        family=p["family"], in_width=p["in_width"], out_width=p["out_width"],
        keep_prob=p["keep_prob"], full_cov=p["full_cov"],
        skip_mask_rows=tuple(p["skip_mask_rows"]))
        for gid, p in manifest["posteriors"].items()}
    priors = {gid: Prior(kind=p["kind"], lam=p["lam"],
                         groups=tuple(tuple(g) for g in p["groups"]) if p["groups"] else None)
              for gid, p in manifest["priors"].items()}
    lik_cfg = manifest["likelihood"]
    likelihood = (GaussianRegression(trainable=lik_cfg["trainable"],
                                     init_var=lik_cfg["init_var"])
                  if lik_cfg["kind"] == "gaussian"
                  else CategoricalSoftmax(classes=lik_cfg["classes"]))
    state = VariationalState(posteriors=posteriors, priors=priors, params=params)
    return TrainedModel(net=net, state=state, likelihood=likelihood,
                        config=TrainConfig(**manifest["train_config"]),
                        y_mean=manifest["y_mean"], y_scale=manifest["y_scale"])
