"""Offline actor-critic learner with a trained-uncertainty behavior constraint.

Phase 2 of the two-phase procedure: given a dataset and a trained Morse
uncertainty model, run twin-critic TD learning with target-policy smoothing
and delayed policy updates. The policy objective maximizes

    Q(s, a_pi) / Z_Q  -  (exp(C / mu) - 1) * ||a_pi - a||^2

where C = 1 - M(s, a_pi) is the Morse uncertainty of the policy's own
action and Z_Q is the batch mean |Q|, detached. The dynamic coefficient
vanishes where the policy stays on dataset support and grows exponentially
as it strays, so regularization is per-sample rather than global.

Two baseline regularizers ship alongside: a constant-coefficient cloning
term and no term at all (plain Q ascent), plus a standalone behavioral
cloner whose weighted variant reuses the dynamic coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, NumericError
from .kernels import kernel_grad, kernel_value
from .morse import MorseNet
from .nn import AdamState, DenseNet, adam_step, soft_update
from .validation import as_matrix, check_fitted

__all__ = [
    "CriticEnsemble",
    "BstDiagnostics",
    "td_targets",
    "critic_update",
    "bst_policy_update",
    "TD3BST",
    "BCPolicy",
    "NormalizedPolicy",
    "EvalResult",
    "evaluate",
]

AGGREGATIONS = ("cdq", "independent")
REGULARIZERS = ("bst", "fixed", "none")


@dataclass
class CriticEnsemble:
    """Online and target value nets plus their optimizer states.

    ``aggregation`` picks both the TD target and the policy readout:
    "cdq" bootstraps from the pointwise minimum over target critics and
    feeds the policy critic 0; "independent" bootstraps each critic from
    its own target and feeds the policy the ensemble mean.
    """

    nets: list
    targets: list
    opts: list
    aggregation: str = "cdq"

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}"
            )
        if not self.nets:
            raise ConfigError("need at least one critic")

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        hidden: tuple,
        n_critics: int,
        aggregation: str,
        rng: np.random.Generator,
        learning_rate: float,
    ) -> "CriticEnsemble":
        if n_critics < 1:
            raise ConfigError(f"n_critics must be >= 1, got {n_critics}")
        sizes = (state_dim + action_dim, *hidden, 1)
        nets = [DenseNet.create(sizes, rng) for _ in range(n_critics)]
        targets = [net.copy() for net in nets]
        opts = [AdamState.for_net(net, learning_rate=learning_rate) for net in nets]
        return cls(nets, targets, opts, aggregation)

    @property
    def n_critics(self) -> int:
        return len(self.nets)

    def target_values(self, s_norm, actions) -> np.ndarray:
        """(n_critics, batch) matrix of target-net values."""
        x = np.concatenate([s_norm, actions], axis=1)
        return np.stack([net.forward(x)[:, 0] for net in self.targets])


def td_targets(
    ensemble: CriticEnsemble,
    policy_target: DenseNet,
    rewards,
    next_s_norm,
    dones,
    gamma: float,
    noise_sigma: float,
    noise_clip: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """(n_critics, batch) regression targets under the aggregation mode.

    The bootstrap action is the target policy's choice under clipped
    Gaussian smoothing noise; terminal transitions regress to the bare
    reward. Clipped-min targets are shared by all critics; independent
    targets give each critic its own bootstrap.
    """
    n = len(next_s_norm)
    adim = policy_target.n_outputs
    noise = np.clip(
        rng.normal(0.0, noise_sigma, size=(n, adim)), -noise_clip, noise_clip
    )
    a_next = np.clip(policy_target.forward(next_s_norm) + noise, -1.0, 1.0)
    q_next = ensemble.target_values(next_s_norm, a_next)
    mask = 1.0 - np.asarray(dones, dtype=np.float64)
    if ensemble.aggregation == "cdq":
        ys = np.broadcast_to(
            rewards + gamma * mask * q_next.min(axis=0), (ensemble.n_critics, n)
        )
    else:
        ys = rewards + gamma * mask * q_next
    if not np.all(np.isfinite(ys)):
        raise NumericError("non-finite TD target")
    return ys


def critic_update(
    ensemble: CriticEnsemble,
    policy_target: DenseNet,
    s_norm,
    actions,
    rewards,
    next_s_norm,
    dones,
    gamma: float,
    noise_sigma: float,
    noise_clip: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One TD regression step for every online critic; returns the losses."""
    n = len(s_norm)
    ys = td_targets(
        ensemble, policy_target, rewards, next_s_norm, dones,
        gamma, noise_sigma, noise_clip, rng,
    )
    x = np.concatenate([s_norm, actions], axis=1)
    losses = np.empty(ensemble.n_critics)
    for i, (net, opt) in enumerate(zip(ensemble.nets, ensemble.opts)):
        q = net.forward(x, record=True)[:, 0]
        err = q - ys[i]
        losses[i] = float(np.mean(err * err))
        tape, _ = net.backward((2.0 * err / n)[:, np.newaxis])
        adam_step(net, tape, opt)
    return losses


@dataclass
class BstDiagnostics:
    """Per-update summary of the regularizer's moving parts.

    Bounds are checked on construction: uncertainty lives in [0, 1] and the
    coefficient in [0, e^(1/mu) - 1], so a violation means a real bug.
    """

    c_min: float
    c_max: float
    c_mean: float
    w_min: float
    w_max: float
    w_mean: float
    z_q: float
    q_term: float
    bc_term: float
    loss: float
    mu: float
    z_clamped: bool = False

    def __post_init__(self):
        if self.mu > 0:  # bounds only defined for the dynamic coefficient
            w_cap = np.expm1(1.0 / self.mu)
            if not (-1e-12 <= self.c_min and self.c_max <= 1.0 + 1e-12):
                raise NumericError(
                    f"uncertainty outside [0, 1]: [{self.c_min}, {self.c_max}]"
                )
            if not (-1e-12 <= self.w_min and self.w_max <= w_cap * (1 + 1e-12)):
                raise NumericError(
                    f"coefficient outside [0, {w_cap}]: [{self.w_min}, {self.w_max}]"
                )


def _policy_q_and_grad(ensemble: CriticEnsemble, s_norm, a_pi):
    """Readout Q(s, a_pi) and dQ/da_pi under the ensemble's aggregation."""
    x = np.concatenate([s_norm, a_pi], axis=1)
    adim = a_pi.shape[1]
    ones = np.ones((len(x), 1))
    if ensemble.aggregation == "cdq":
        net = ensemble.nets[0]
        q = net.forward(x, record=True)[:, 0]
        _, gin = net.backward(ones)
        return q, gin[:, -adim:]
    qs, grads = [], []
    for net in ensemble.nets:
        qs.append(net.forward(x, record=True)[:, 0])
        _, gin = net.backward(ones)
        grads.append(gin[:, -adim:])
    return np.mean(qs, axis=0), np.mean(grads, axis=0)


def bst_policy_update(
    policy: DenseNet,
    policy_opt: AdamState,
    ensemble: CriticEnsemble,
    morse: MorseNet | None,
    s_norm,
    s_raw,
    actions,
    mu: float,
    regularizer: str = "bst",
    fixed_alpha: float = 1.0,
) -> BstDiagnostics:
    """One ascent step on the regularized policy objective.

    The cloning coefficient is treated as a constant during
    differentiation: no gradient flows through the uncertainty model into
    the policy, which closes off coefficient-gaming updates.
    """
    n = len(s_norm)
    a_pi = policy.forward(s_norm, record=True)

    if regularizer == "bst":
        c = morse.uncertainty(s_raw, a_pi)
        w = np.expm1(c / mu)
    elif regularizer == "fixed":
        c = np.zeros(n)
        w = np.full(n, fixed_alpha)
    elif regularizer == "none":
        c = np.zeros(n)
        w = np.zeros(n)
    else:
        raise ConfigError(
            f"regularizer must be one of {REGULARIZERS}, got {regularizer!r}"
        )

    q, dq_da = _policy_q_and_grad(ensemble, s_norm, a_pi)
    z_q = float(np.mean(np.abs(q)))
    z_clamped = z_q == 0.0
    if z_clamped:
        z_q = 1e-6

    diff = a_pi - actions
    bc_each = np.sum(diff * diff, axis=1)
    q_term = float(np.mean(q)) / z_q
    bc_term = float(np.mean(w * bc_each))
    loss = -(q_term - bc_term)

    # d(loss)/d(a_pi): descent on -(Q/Z_Q) + w * ||a_pi - a||^2
    grad_a = -dq_da / (n * z_q) + (2.0 / n) * w[:, np.newaxis] * diff
    tape, _ = policy.backward(grad_a)
    adam_step(policy, tape, policy_opt)

    return BstDiagnostics(
        c_min=float(c.min()),
        c_max=float(c.max()),
        c_mean=float(c.mean()),
        w_min=float(w.min()),
        w_max=float(w.max()),
        w_mean=float(w.mean()),
        z_q=z_q,
        q_term=q_term,
        bc_term=bc_term,
        loss=loss,
        mu=mu if regularizer == "bst" else 0.0,
        z_clamped=z_clamped,
    )


class NormalizedPolicy:
    """Deterministic policy over raw states: normalization plus net."""

    def __init__(self, net: DenseNet, state_mean, state_std):
        self.net = net
        self.state_mean = np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.asarray(state_std, dtype=np.float64)

    def __call__(self, state) -> np.ndarray:
        s = (np.asarray(state, dtype=np.float64) - self.state_mean) / self.state_std
        return self.net.forward(s)

    def predict(self, states) -> np.ndarray:
        s = (as_matrix(states, "states") - self.state_mean) / self.state_std
        return self.net.forward(s)


class TD3BST(BaseEstimator):
    """Two-phase offline learner, phase 2: constrained actor-critic.

    ``fit`` consumes a ReplayDataset (and optionally an environment for
    periodic evaluation). The ``regularizer`` switch selects the dynamic
    coefficient ("bst", needs ``morse``), a constant one ("fixed"), or pure
    Q ascent ("none"). ``q_aggregation`` switches between clipped-min and
    independent-mean ensembles.
    """

    def __init__(
        self,
        morse: MorseNet | None = None,
        regularizer: str = "bst",
        mu: float = 0.5,
        gamma: float = 0.99,
        rho: float = 0.005,
        policy_delay: int = 2,
        n_steps: int = 200_000,
        batch_size: int = 256,
        learning_rate: float = 3e-4,
        hidden_layers: int = 2,
        hidden_units: int = 256,
        n_critics: int = 2,
        q_aggregation: str = "cdq",
        noise_sigma: float = 0.2,
        noise_clip: float = 0.5,
        fixed_alpha: float = 1.0,
        eval_every: int = 5000,
        eval_episodes: int = 20,
        seed: int = 0,
    ):
        self.morse = morse
        self.regularizer = regularizer
        self.mu = mu
        self.gamma = gamma
        self.rho = rho
        self.policy_delay = policy_delay
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.n_critics = n_critics
        self.q_aggregation = q_aggregation
        self.noise_sigma = noise_sigma
        self.noise_clip = noise_clip
        self.fixed_alpha = fixed_alpha
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        self.seed = seed

    def _validate(self, dataset):
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(
                f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}"
            )
        if self.q_aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"q_aggregation must be one of {AGGREGATIONS}, "
                f"got {self.q_aggregation!r}"
            )
        if self.regularizer == "bst":
            if self.morse is None:
                raise ConfigError("the dynamic regularizer needs a fitted morse model")
            check_fitted(self.morse, ["net_"])
            if (
                self.morse.state_dim_ != dataset.state_dim
                or self.morse.action_dim_ != dataset.action_dim
            ):
                raise ConfigError(
                    f"morse dims ({self.morse.state_dim_}, "
                    f"{self.morse.action_dim_}) do not match dataset dims "
                    f"({dataset.state_dim}, {dataset.action_dim})"
                )
            if self.mu <= 0:
                raise ConfigError(f"mu must be > 0, got {self.mu}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.policy_delay < 1:
            raise ConfigError(f"policy_delay must be >= 1, got {self.policy_delay}")
        if self.n_steps < 0:
            raise ConfigError(f"n_steps must be >= 0, got {self.n_steps}")
        if len(dataset) == 0:
            raise ValueError("cannot fit on an empty dataset")

    def fit(self, dataset, env=None) -> "TD3BST":
        self._validate(dataset)
        self.state_mean_, self.state_std_ = dataset.state_stats()
        sdim, adim = dataset.state_dim, dataset.action_dim

        init_seed, batch_seed, noise_seed, eval_seed = np.random.SeedSequence(
            self.seed
        ).spawn(4)
        init_rng = np.random.default_rng(init_seed)
        batch_rng = np.random.default_rng(batch_seed)
        noise_rng = np.random.default_rng(noise_seed)
        self._eval_seed = eval_seed

        hidden = tuple([self.hidden_units] * self.hidden_layers)
        self.policy_net_ = DenseNet.create(
            (sdim, *hidden, adim), init_rng, squash_output=True
        )
        self.policy_target_ = self.policy_net_.copy()
        self.policy_opt_ = AdamState.for_net(self.policy_net_, self.learning_rate)
        self.critics_ = CriticEnsemble.create(
            sdim, adim, hidden, self.n_critics, self.q_aggregation,
            init_rng, self.learning_rate,
        )

        self.n_critic_updates_ = 0
        self.n_policy_updates_ = 0
        self.n_soft_updates_ = 0
        self.diagnostics_ = []
        self.metrics_ = []
        self.eval_history_ = []
        self.warnings_ = []

        norm = lambda s: (s - self.state_mean_) / self.state_std_
        last_critic_loss = float("nan")
        for step in range(1, self.n_steps + 1):
            s, a, r, s2, done = dataset.minibatch(batch_rng, self.batch_size)
            losses = critic_update(
                self.critics_, self.policy_target_, norm(s), a, r, norm(s2),
                done, self.gamma, self.noise_sigma, self.noise_clip, noise_rng,
            )
            last_critic_loss = float(np.mean(losses))
            self.n_critic_updates_ += 1

            if step % self.policy_delay == 0:
                diag = bst_policy_update(
                    self.policy_net_, self.policy_opt_, self.critics_,
                    self.morse, norm(s), s, a,
                    self.mu, self.regularizer, self.fixed_alpha,
                )
                self.n_policy_updates_ += 1
                self.diagnostics_.append(diag)
                if diag.z_clamped:
                    self.warnings_.append(
                        f"step {step}: batch mean |Q| was zero, clamped"
                    )
                soft_update(self.policy_target_, self.policy_net_, self.rho)
                for tgt, net in zip(self.critics_.targets, self.critics_.nets):
                    soft_update(tgt, net, self.rho)
                self.n_soft_updates_ += 1
                self.metrics_.append(
                    {
                        "step": step,
                        "critic_loss": last_critic_loss,
                        "policy_loss": diag.loss,
                        "mean_w": diag.w_mean,
                        "mean_c": diag.c_mean,
                        "z_q": diag.z_q,
                    }
                )

            if env is not None and self.eval_every and step % self.eval_every == 0:
                result = evaluate(
                    self.policy(), env, self.eval_episodes,
                    seed=np.random.default_rng(self._eval_seed).integers(2**31),
                )
                self.eval_history_.append(
                    {
                        "step": step,
                        "mean_return": result.mean_return,
                        "success_rate": result.success_rate,
                    }
                )
        return self

    def policy(self) -> NormalizedPolicy:
        check_fitted(self, ["policy_net_"])
        return NormalizedPolicy(self.policy_net_, self.state_mean_, self.state_std_)

    def predict(self, states) -> np.ndarray:
        check_fitted(self, ["policy_net_"])
        return self.policy().predict(states)


class BCPolicy(BaseEstimator):
    """Behavioral cloning, plain or downweighted by trained uncertainty.

    The weighted variant minimizes w(a_pi) * ||a_pi - a||^2 with
    w = exp(C/mu) - 1 and C the Morse uncertainty of the policy's own
    action. Unlike the actor-critic update, the gradient here flows through
    the weight itself: with no value term to game, shrinking the
    coefficient by moving toward certain regions is exactly the
    mode-seeking behavior wanted from this estimator, rather than an
    exploit. The all-mode average pulls toward the action centroid; the
    weight gradient pulls off it, so training settles into a single mode.
    """

    def __init__(
        self,
        weighting: str = "none",
        morse: MorseNet | None = None,
        mu: float = 0.5,
        n_steps: int = 5000,
        batch_size: int = 256,
        learning_rate: float = 3e-4,
        hidden_layers: int = 2,
        hidden_units: int = 256,
        seed: int = 0,
    ):
        self.weighting = weighting
        self.morse = morse
        self.mu = mu
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.seed = seed

    def fit(self, dataset) -> "BCPolicy":
        if self.weighting not in ("none", "morse"):
            raise ConfigError(
                f"weighting must be 'none' or 'morse', got {self.weighting!r}"
            )
        if self.weighting == "morse":
            if self.morse is None:
                raise ConfigError("morse weighting needs a fitted morse model")
            check_fitted(self.morse, ["net_"])
            if self.mu <= 0:
                raise ConfigError(f"mu must be > 0, got {self.mu}")
        if len(dataset) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if self.n_steps < 0:
            raise ConfigError(f"n_steps must be >= 0, got {self.n_steps}")

        self.state_mean_, self.state_std_ = dataset.state_stats()
        sdim, adim = dataset.state_dim, dataset.action_dim
        init_seed, batch_seed = np.random.SeedSequence(self.seed).spawn(2)
        init_rng = np.random.default_rng(init_seed)
        batch_rng = np.random.default_rng(batch_seed)
        hidden = tuple([self.hidden_units] * self.hidden_layers)
        self.policy_net_ = DenseNet.create(
            (sdim, *hidden, adim), init_rng, squash_output=True
        )
        opt = AdamState.for_net(self.policy_net_, self.learning_rate)
        self.loss_history_ = np.empty(self.n_steps)

        norm = lambda s: (s - self.state_mean_) / self.state_std_
        for step in range(self.n_steps):
            s, a, _, _, _ = dataset.minibatch(batch_rng, self.batch_size)
            n = len(s)
            a_pi = self.policy_net_.forward(norm(s), record=True)
            diff = a_pi - a
            sq = np.sum(diff * diff, axis=1)
            if self.weighting == "none":
                loss = float(np.mean(sq))
                grad_a = 2.0 * diff / n
            else:
                loss, grad_a = self._weighted_terms(s, a_pi, diff, sq)
            tape, _ = self.policy_net_.backward(grad_a)
            adam_step(self.policy_net_, tape, opt)
            self.loss_history_[step] = loss
        return self

    def _weighted_terms(self, s_raw, a_pi, diff, sq):
        """Loss mean[w * ||a_pi - a||^2] and its a_pi gradient.

        Both factors depend on a_pi: d/da = w * 2 diff + dw/da * sq, with
        dw/da = exp(C/mu)/mu * (-dM/da). The certainty gradient has two
        routes, through the perturbation net's action input and through
        the kernel's target argument.
        """
        morse, spec = self.morse, self.morse.kernel_spec_
        n = len(a_pi)
        s_norm_m = (s_raw - morse.state_mean_) / morse.state_std_
        x = np.concatenate([s_norm_m, a_pi], axis=1)
        f = morse.net_.forward(x, record=True)
        m = kernel_value(spec, f, a_pi)
        c = 1.0 - m
        w = np.expm1(c / self.mu)

        gk = kernel_grad(spec, f, a_pi)  # dK/df
        _, gin = morse.net_.backward(gk)
        dm_da = gin[:, -a_pi.shape[1]:] - gk  # via f's input, via the target
        dw_da = (np.exp(c / self.mu) / self.mu)[:, np.newaxis] * (-dm_da)

        loss = float(np.mean(w * sq))
        grad_a = (w[:, np.newaxis] * 2.0 * diff + dw_da * sq[:, np.newaxis]) / n
        return loss, grad_a

    def policy(self) -> NormalizedPolicy:
        check_fitted(self, ["policy_net_"])
        return NormalizedPolicy(self.policy_net_, self.state_mean_, self.state_std_)

    def predict(self, states) -> np.ndarray:
        check_fitted(self, ["policy_net_"])
        return self.policy().predict(states)


@dataclass
class EvalResult:
    """Rollout statistics plus the dataset-deviation sample."""

    returns: np.ndarray
    lengths: np.ndarray
    deviations: np.ndarray | None = None

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean())

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.returns > 0.0))


def _as_actor(policy):
    if callable(policy):
        single = policy
        batch = getattr(policy, "predict", None)
        if batch is None:
            batch = lambda states: np.stack([single(s) for s in states])
    else:
        batch = policy.predict
        single = lambda s: policy.predict(s[np.newaxis, :])[0]
    return single, batch


def evaluate(
    policy,
    env,
    n_episodes: int,
    seed: int = 0,
    dataset=None,
) -> EvalResult:
    """Deterministic rollouts; optionally the action deviation profile.

    ``policy`` is a callable state -> action or anything with a batched
    ``predict``. When a dataset is supplied, the result also carries
    ||pi(s) - a|| over every dataset state, the raw material for deviation
    histograms.
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    single, batch = _as_actor(policy)
    returns = np.empty(n_episodes)
    lengths = np.empty(n_episodes, dtype=int)
    for ep, ep_seed in enumerate(np.random.SeedSequence(seed).spawn(n_episodes)):
        rng = np.random.default_rng(ep_seed)
        s = env.reset(rng)
        total = 0.0
        steps = 0
        for _ in range(env.horizon):
            s, r, done = env.step(s, single(s))
            total += r
            steps += 1
            if done:
                break
        returns[ep] = total
        lengths[ep] = steps
    deviations = None
    if dataset is not None:
        pred = batch(dataset.states)
        deviations = np.linalg.norm(pred - dataset.actions, axis=1)
    return EvalResult(returns=returns, lengths=lengths, deviations=deviations)
