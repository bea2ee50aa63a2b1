"""Conditional mixture density network q(theta | x) trained with the atomic APT loss.

Gradients are hand-written reverse mode over a flat parameter vector, which
keeps finite-difference checks and (de)serialisation trivial.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .errors import ContractError, FormatError, LeakageError, TrainingError
from .optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)

FORMAT_VERSION = "cohort-sbi-mdn/1"
LOG_SCALE_BOUND = 7.0
VARIANCE_FLOOR = 1e-12
_LOG_2PI = math.log(2 * math.pi)


class Standardizer:
    """Per-dimension affine z-scoring of parameters and summaries."""

    def __init__(self, theta_shift, theta_scale, x_shift, x_scale):
        self.theta_shift = np.asarray(theta_shift, dtype=float)
        self.theta_scale = np.asarray(theta_scale, dtype=float)
        self.x_shift = np.asarray(x_shift, dtype=float)
        self.x_scale = np.asarray(x_scale, dtype=float)

    @classmethod
    def fit(cls, theta, x) -> "Standardizer":
        theta = np.atleast_2d(theta)
        x = np.atleast_2d(x)
        return cls(
            theta.mean(axis=0), np.sqrt(np.maximum(theta.var(axis=0), VARIANCE_FLOOR)),
            x.mean(axis=0), np.sqrt(np.maximum(x.var(axis=0), VARIANCE_FLOOR)),
        )

    @classmethod
    def identity(cls, theta_dim: int, x_dim: int) -> "Standardizer":
        return cls(np.zeros(theta_dim), np.ones(theta_dim), np.zeros(x_dim), np.ones(x_dim))

    def theta_to_std(self, theta):
        return (np.asarray(theta, dtype=float) - self.theta_shift) / self.theta_scale

    def theta_from_std(self, z):
        return np.asarray(z) * self.theta_scale + self.theta_shift

    def x_to_std(self, x):
        return (np.asarray(x, dtype=float) - self.x_shift) / self.x_scale

    def x_from_std(self, z):
        return np.asarray(z) * self.x_scale + self.x_shift

    @property
    def log_abs_det(self) -> float:
        """log |d theta_std / d theta| summed over dimensions (negative of log scales)."""
        return float(-np.sum(np.log(self.theta_scale)))

    def to_dict(self):
        return {k: v.tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta_shift"], d["theta_scale"], d["x_shift"], d["x_scale"])


@dataclass
class TrainingOptions:
    batch_size: int = 256
    n_atoms: int = 10
    learning_rate: float = 5e-4
    validation_fraction: float = 0.1
    patience: int = 20
    max_epochs: int = 500
    clip_norm: float = 5.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    # "atomic" everywhere, or "apt": exact -log q for batches drawn entirely from the prior
    loss: str = "atomic"
    combined_mle: bool = False  # with "apt": add -log q on prior rows of mixed batches

    def __post_init__(self):
        if self.loss not in ("apt", "atomic"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if not 2 <= self.n_atoms <= self.batch_size:
            raise ContractError(f"need 2 <= n_atoms <= batch_size, got {self.n_atoms}, {self.batch_size}")


class MixtureDensityNetwork:
    """Tanh MLP emitting a K-component diagonal Gaussian mixture over theta."""

    def __init__(self, n_inputs: int, n_outputs: int, hidden=(64, 64), n_components: int = 10,
                 rng: np.random.Generator | None = None):
        self.n_inputs = int(n_inputs)
        self.n_outputs = int(n_outputs)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_components = int(n_components)
        k, d = self.n_components, self.n_outputs
        shapes = []
        fan_in = self.n_inputs
        for i, h in enumerate(self.hidden):
            shapes += [(f"W{i}", (fan_in, h)), (f"b{i}", (h,))]
            fan_in = h
        shapes += [
            ("Wa", (fan_in, k)), ("ba", (k,)),
            ("Wm", (fan_in, k * d)), ("bm", (k * d,)),
            ("Ws", (fan_in, k * d)), ("bs", (k * d,)),
        ]
        self.shapes = shapes
        self.params = np.zeros(sum(int(np.prod(s)) for _, s in shapes))
        if rng is not None:
            self.initialize(rng)

    @property
    def n_weights(self) -> int:
        return self.params.size

    def views(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            out[name] = flat[i:i + n].reshape(shape)
            i += n
        return out

    def initialize(self, rng: np.random.Generator) -> None:
        v = self.views()
        for name, arr in v.items():
            if name.startswith("W"):
                arr[...] = rng.standard_normal(arr.shape) / math.sqrt(arr.shape[0])
        # Heads start small so the initial mixture is broad and well spread.
        v["Wa"] *= 0.1
        v["Wm"] *= 0.1
        v["Ws"] *= 0.1
        v["bm"][...] = rng.standard_normal(v["bm"].shape)

    # forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray):
        """Mixture parameters for standardized inputs ``x`` (B, n_inputs)."""
        v = self.views()
        hs = [np.atleast_2d(x)]
        for i in range(len(self.hidden)):
            hs.append(np.tanh(hs[-1] @ v[f"W{i}"] + v[f"b{i}"]))
        h = hs[-1]
        b = h.shape[0]
        logits = h @ v["Wa"] + v["ba"]
        mu = (h @ v["Wm"] + v["bm"]).reshape(b, self.n_components, self.n_outputs)
        ls_raw = (h @ v["Ws"] + v["bs"]).reshape(b, self.n_components, self.n_outputs)
        ls = np.clip(ls_raw, -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        cache = {"hs": hs, "ls_raw": ls_raw}
        return (logits, mu, ls), cache

    def backward(self, cache, d_logits, d_mu, d_ls) -> np.ndarray:
        v = self.views()
        grad = np.zeros_like(self.params)
        g = self.views(grad)
        hs = cache["hs"]
        h = hs[-1]
        b = h.shape[0]
        d_ls = np.where(np.abs(cache["ls_raw"]) < LOG_SCALE_BOUND, d_ls, 0.0)
        d_mu = d_mu.reshape(b, -1)
        d_ls = d_ls.reshape(b, -1)
        g["Wa"][...] = h.T @ d_logits
        g["ba"][...] = d_logits.sum(axis=0)
        g["Wm"][...] = h.T @ d_mu
        g["bm"][...] = d_mu.sum(axis=0)
        g["Ws"][...] = h.T @ d_ls
        g["bs"][...] = d_ls.sum(axis=0)
        dh = d_logits @ v["Wa"].T + d_mu @ v["Wm"].T + d_ls @ v["Ws"].T
        for i in reversed(range(len(self.hidden))):
            da = dh * (1.0 - hs[i + 1] ** 2)
            g[f"W{i}"][...] = hs[i].T @ da
            g[f"b{i}"][...] = da.sum(axis=0)
            if i:
                dh = da @ v[f"W{i}"].T
        return grad

    # serialisation ------------------------------------------------------

    def to_dict(self):
        return {
            "n_inputs": self.n_inputs, "n_outputs": self.n_outputs,
            "hidden": list(self.hidden), "n_components": self.n_components,
            "layer_shapes": [[n, list(s)] for n, s in self.shapes],
            "weights": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "MixtureDensityNetwork":
        net = cls(d["n_inputs"], d["n_outputs"], d["hidden"], d["n_components"])
        if [[n, list(s)] for n, s in net.shapes] != d["layer_shapes"]:
            raise FormatError("layer shapes in file do not match the declared architecture")
        w = np.asarray(d["weights"], dtype=float)
        if w.shape != net.params.shape:
            raise FormatError(f"expected {net.params.size} weights, found {w.size}")
        net.params[...] = w
        return net

    def copy(self) -> "MixtureDensityNetwork":
        return MixtureDensityNetwork.from_dict(self.to_dict())


def mixture_log_prob(mix, theta_std: np.ndarray):
    """log q for ``theta_std`` of shape (B, M, D) under the B mixtures; also returns a cache."""
    logits, mu, ls = mix
    d = mu.shape[-1]
    inv_s = np.exp(-ls)
    z = (theta_std[:, :, None, :] - mu[:, None, :, :]) * inv_s[:, None, :, :]  # B,M,K,D
    comp = -0.5 * np.sum(z * z, axis=-1) - np.sum(ls, axis=-1)[:, None, :] - 0.5 * d * _LOG_2PI
    logw = log_softmax(logits, axis=-1)
    joint = comp + logw[:, None, :]
    out = logsumexp(joint, axis=-1)
    return out, (z, inv_s, joint, out, logits)


def mixture_log_prob_grad(mix_cache, d_out: np.ndarray):
    """Gradients of sum(d_out * log q) wrt (logits, mu, log-scales)."""
    z, inv_s, joint, out, logits = mix_cache
    resp = np.exp(joint - out[..., None])  # B,M,K
    d_comp = d_out[..., None] * resp
    d_logw = d_comp.sum(axis=1)
    d_logits = d_logw - softmax(logits, axis=-1) * d_logw.sum(axis=-1, keepdims=True)
    d_mu = np.einsum("bmk,bmkd->bkd", d_comp, z) * inv_s
    d_ls = np.einsum("bmk,bmkd->bkd", d_comp, z * z - 1.0)
    return d_logits, d_mu, d_ls


def _check_dims(net, theta, x):
    if theta.shape[-1] != net.n_outputs or x.shape[-1] != net.n_inputs:
        raise ContractError(
            f"estimator expects theta dim {net.n_outputs} and x dim {net.n_inputs}, "
            f"got {theta.shape[-1]} and {x.shape[-1]}"
        )


def log_prob(net: MixtureDensityNetwork, standardizer: Standardizer, theta, x) -> np.ndarray:
    """log q(theta | x) as a density over raw theta.

    ``theta`` (n, D) pairs row-wise with ``x`` (n, n_in); a single ``x`` row
    is broadcast over all theta rows.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _check_dims(net, theta, x)
    if x.shape[0] == 1 and theta.shape[0] > 1:
        mix, _ = net.forward(standardizer.x_to_std(x))
        lp, _ = mixture_log_prob(mix, standardizer.theta_to_std(theta)[None])
        return lp[0] + standardizer.log_abs_det
    if x.shape[0] != theta.shape[0]:
        raise ContractError("theta and x must have the same number of rows")
    mix, _ = net.forward(standardizer.x_to_std(x))
    lp, _ = mixture_log_prob(mix, standardizer.theta_to_std(theta)[:, None, :])
    return lp[:, 0] + standardizer.log_abs_det


def draw_atoms(batch_size: int, n_atoms: int, rng: np.random.Generator) -> np.ndarray:
    """(B, M) batch indices; column 0 is the row itself, the rest are distinct others."""
    if n_atoms > batch_size:
        raise ContractError(f"n_atoms={n_atoms} exceeds batch size {batch_size}")
    idx = np.empty((batch_size, n_atoms), dtype=np.int64)
    idx[:, 0] = np.arange(batch_size)
    if n_atoms > 1:
        keys = rng.random((batch_size, batch_size))
        np.fill_diagonal(keys, np.inf)
        idx[:, 1:] = np.argsort(keys, axis=1, kind="stable")[:, : n_atoms - 1]
    return idx


def nll_loss(net, theta_std, x_std, want_grad=True):
    """Mean negative log q over a batch (standardized space).

    This is the exact APT loss for rows whose proposal was the prior: the
    proposal/prior ratio is one and the normaliser is one.
    """
    theta_std = np.atleast_2d(theta_std)
    b = theta_std.shape[0]
    mix, cache = net.forward(x_std)
    lq, mcache = mixture_log_prob(mix, theta_std[:, None, :])
    loss = float(-lq.mean())
    if not want_grad:
        return loss, None
    grads = mixture_log_prob_grad(mcache, np.full((b, 1), -1.0 / b))
    return loss, net.backward(cache, *grads)


def atomic_apt_loss(net, theta_std, x_std, log_prior, n_atoms, rng, want_grad=True):
    """Mean contrastive APT loss over a batch and its gradient.

    ``theta_std``/``x_std`` are standardized; ``log_prior`` holds log p at the
    matching raw theta rows. The Jacobian of the theta standardisation is the
    same for every atom and cancels inside the softmax.
    """
    theta_std = np.atleast_2d(theta_std)
    b = theta_std.shape[0]
    atoms = draw_atoms(b, n_atoms, rng)
    mix, cache = net.forward(x_std)
    lq, mcache = mixture_log_prob(mix, theta_std[atoms])
    logits = lq - np.asarray(log_prior)[atoms]
    losses = logsumexp(logits, axis=1) - logits[:, 0]
    loss = float(losses.mean())
    if not want_grad:
        return loss, None
    d_logits_atoms = softmax(logits, axis=1)
    d_logits_atoms[:, 0] -= 1.0
    d_logits_atoms /= b
    grads = mixture_log_prob_grad(mcache, d_logits_atoms)
    return loss, net.backward(cache, *grads)


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]


def _objective(net, ts, xs, log_prior, from_prior, opts, rng, want_grad=True):
    """Training objective for one batch.

    Rows sampled from the prior get the exact APT loss (plain -log q) when the
    whole batch came from the prior; otherwise every row gets the atomic loss
    and, with ``opts.combined_mle``, prior rows add a -log q term.
    """
    if opts.loss == "apt" and from_prior.all():
        return nll_loss(net, ts, xs, want_grad)
    loss, grad = atomic_apt_loss(net, ts, xs, log_prior, min(opts.n_atoms, ts.shape[0]), rng, want_grad)
    if opts.loss == "apt" and opts.combined_mle and from_prior.any():
        l2, g2 = nll_loss(net, ts[from_prior], xs[from_prior], want_grad)
        loss += l2
        if want_grad:
            grad += g2
    return loss, grad


def _val_loss(net, ts, xs, log_prior, from_prior, opts, seed) -> float:
    rng = np.random.default_rng(seed)
    n = ts.shape[0]
    total, count = 0.0, 0
    for start in range(0, n, opts.batch_size):
        sl = slice(start, min(start + opts.batch_size, n))
        m = sl.stop - sl.start
        if m < 2:
            continue
        loss, _ = _objective(net, ts[sl], xs[sl], log_prior[sl], from_prior[sl], opts, rng, want_grad=False)
        total += loss * m
        count += m
    return total / count if count else float("nan")


def train(net: MixtureDensityNetwork | None, theta, x, prior, opts: TrainingOptions | None = None,
          seed: int = 0, standardizer: Standardizer | None = None, hidden=(64, 64),
          n_components: int = 10, from_prior=None):
    """Fit ``net`` on all (theta, x) pairs with early stopping on a held-out split.

    A fresh network (and a standardizer fitted on the data) is built when
    ``net`` is None; otherwise training warm-starts and the given
    standardizer is reused. ``from_prior`` flags rows whose proposal was the
    prior (default: none). Returns (net, standardizer, history) with the
    best-validation weights restored.
    """
    opts = opts or TrainingOptions()
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if theta.shape[0] == 0 or theta.shape[0] != x.shape[0]:
        raise ContractError("dataset must be non-empty with matching theta/x rows")
    n = theta.shape[0]
    from_prior = np.zeros(n, dtype=bool) if from_prior is None else np.asarray(from_prior, dtype=bool)
    log_prior = np.asarray(prior.log_density(theta), dtype=float).reshape(-1)
    if not np.all(np.isfinite(log_prior)):
        raise ContractError("training parameters must lie inside the prior support")

    init_ss, split_ss, batch_ss, val_ss = np.random.SeedSequence(seed).spawn(4)
    if net is None:
        net = MixtureDensityNetwork(x.shape[1], theta.shape[1], hidden, n_components,
                                    rng=np.random.default_rng(init_ss))
        standardizer = Standardizer.fit(theta, x)
    elif standardizer is None:
        standardizer = Standardizer.fit(theta, x)
    _check_dims(net, theta, x)

    perm = np.random.default_rng(split_ss).permutation(n)
    n_val = int(round(opts.validation_fraction * n))
    n_val = min(max(n_val, 2), n - opts.n_atoms) if n >= opts.n_atoms + 2 else 0
    val_idx, trn_idx = perm[:n_val], perm[n_val:]
    if trn_idx.size < opts.n_atoms:
        raise ContractError(f"training split of {trn_idx.size} rows is smaller than n_atoms")
    if n_val == 0:
        val_idx = trn_idx
    ts = standardizer.theta_to_std(theta)
    xs = standardizer.x_to_std(x)
    val_seed = int(val_ss.generate_state(1)[0])

    def validate():
        return _val_loss(net, ts[val_idx], xs[val_idx], log_prior[val_idx], from_prior[val_idx],
                         opts, val_seed)

    opt = Adam(net.params, lr=opts.learning_rate, beta1=opts.adam_betas[0], beta2=opts.adam_betas[1])
    rng = np.random.default_rng(batch_ss)
    hist = TrainingHistory()
    hist.val_loss.append(validate())
    hist.train_loss.append(float("nan"))
    best = net.params.copy()
    bad_epochs = 0
    batch_counter = 0
    for epoch in range(1, opts.max_epochs + 1):
        order = trn_idx[rng.permutation(trn_idx.size)]
        losses = []
        for start in range(0, order.size, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            if idx.size < opts.n_atoms:
                continue
            loss, grad = _objective(net, ts[idx], xs[idx], log_prior[idx], from_prior[idx], opts, rng)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_counter}")
            clip_grad_norm(grad, opts.clip_norm)
            opt.step(grad)
            losses.append(loss)
            batch_counter += 1
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_loss.append(validate())
        hist.epochs = epoch
        if hist.val_loss[-1] < hist.val_loss[hist.best_epoch]:
            hist.best_epoch = epoch
            best[...] = net.params
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= opts.patience:
                break
    net.params[...] = best
    log.debug("trained %d epochs, best val %.4f at %d", hist.epochs, hist.best_val_loss, hist.best_epoch)
    return net, standardizer, hist


def sample_mixture(mix, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the single mixture in ``mix`` (batch of one)."""
    logits, mu, ls = mix
    w = softmax(logits[0])
    k = rng.choice(w.size, size=n, p=w)
    return mu[0, k] + np.exp(ls[0, k]) * rng.standard_normal((n, mu.shape[-1]))


def sample_posterior(net, standardizer, x_o, n: int, prior, rng: np.random.Generator,
                     probe: int = 100_000, min_acceptance: float = 1e-4, chunk: int | None = None):
    """``n`` draws from q(theta | x_o) restricted to the prior support.

    Returns (draws, leakage) with leakage = rejected / proposed.
    """
    x_o = np.atleast_2d(np.asarray(x_o, dtype=float))
    if x_o.shape[1] != net.n_inputs:
        raise ContractError(f"x_o has {x_o.shape[1]} entries, estimator expects {net.n_inputs}")
    mix, _ = net.forward(standardizer.x_to_std(x_o))
    chunk = chunk or max(2 * n, 1000)
    accepted, proposed, n_acc = [], 0, 0
    while n_acc < n:
        raw = standardizer.theta_from_std(sample_mixture(mix, chunk, rng))
        ok = prior.in_support(raw)
        proposed += chunk
        accepted.append(raw[ok])
        n_acc += int(ok.sum())
        if proposed >= probe and n_acc / proposed < min_acceptance:
            raise LeakageError(
                f"acceptance {n_acc / proposed:.2e} over {proposed} proposals is below {min_acceptance:g}"
            )
    draws = np.concatenate(accepted)[:n]
    return draws, 1.0 - n_acc / proposed


@dataclass
class Estimator:
    """Trained network plus its standardizer; the unit that gets persisted."""

    net: MixtureDensityNetwork
    standardizer: Standardizer
    options: TrainingOptions = field(default_factory=TrainingOptions)

    def log_prob(self, theta, x):
        return log_prob(self.net, self.standardizer, theta, x)

    def sample(self, x_o, n, prior, rng, **kw):
        return sample_posterior(self.net, self.standardizer, x_o, n, prior, rng, **kw)

    def to_json(self) -> str:
        return json.dumps({
            "version": FORMAT_VERSION,
            "network": self.net.to_dict(),
            "standardizer": self.standardizer.to_dict(),
            "training_options": asdict(self.options),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Estimator":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported estimator format {d.get('version')!r}")
        opts = d.get("training_options", {})
        if "adam_betas" in opts:
            opts["adam_betas"] = tuple(opts["adam_betas"])
        return cls(MixtureDensityNetwork.from_dict(d["network"]),
                   Standardizer.from_dict(d["standardizer"]), TrainingOptions(**opts))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Estimator":
        return cls.from_json(Path(path).read_text())
