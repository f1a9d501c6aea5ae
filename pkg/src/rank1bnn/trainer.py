"""SGD-with-momentum training of rank-1 BNNs, with the usual schedules and initializers."""

from __future__ import annotations

import ast
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from rank1bnn import autodiff as ad
from rank1bnn import distributions as dist
from rank1bnn import data as data_lib
from rank1bnn.autodiff import Tensor
from rank1bnn.checkpoint import Checkpoint
from rank1bnn.distributions import MixtureDistribution
from rank1bnn.layers import Rank1Dense, Rank1MLP
from rank1bnn.metrics import MetricsReport, evaluate
from rank1bnn.objectives import ElboConfig, LikelihoodMode, elbo_loss

logger = logging.getLogger(__name__)

INITIALIZERS = {
    "trainable_normal": dist.GAUSSIAN,
    "trainable_cauchy": dist.CAUCHY,
    "trainable_log_normal": dist.LOG_GAUSSIAN,
    "trainable_deterministic": dist.POINT,
    "ones": dist.POINT,
}
REGULARIZERS = {
    "normal_kl_divergence": dist.GAUSSIAN,
    "cauchy_kl_divergence": dist.CAUCHY,
    "log_normal_kl_divergence": dist.LOG_GAUSSIAN,
    "none": dist.POINT,
}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} during epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    """Hyperparameters. Names follow the published rank-1 BNN tables where one exists."""

    ensemble_size: int = 4
    base_learning_rate: float = 0.1
    lr_decay_ratio: float = 0.2
    lr_decay_epochs: Tuple[int, ...] = (80, 160, 180)
    train_epochs: int = 250
    kl_annealing_epochs: int = 200
    l2: float = 1e-4
    prior_mean: float = 1.0
    prior_stddev: float = 0.1
    random_sign_init: float = -0.5
    dropout_rate: float = 1e-3
    likelihood_mode: str = "average"
    momentum: float = 0.9
    seed: int = 0
    eval_samples_per_component: int = 1
    alpha_initializer: str = "trainable_normal"
    gamma_initializer: str = "trainable_normal"
    alpha_regularizer: str = "normal_kl_divergence"
    gamma_regularizer: str = "normal_kl_divergence"
    num_ece_bins: int = 15
    clip_norm: float = 0.0
    batch_size: int = 64
    # desk-scale model and data
    dataset: str = "two_moons"
    num_examples: int = 2000
    noise: float = 0.1
    data_path: str = ""
    label_path: str = ""
    test_fraction: float = 0.2
    hidden_units: Tuple[int, ...] = (64, 64)
    activation: str = "relu"
    checkpoint_interval: int = 0
    per_example_eval: bool = True

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.hidden_units = tuple(int(h) for h in self.hidden_units)
        self.validate()

    def validate(self) -> None:
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if self.kl_annealing_epochs <= 0:
            raise ConfigError("kl_annealing_epochs must be positive")
        if self.train_epochs > 0:
            if self.lr_decay_epochs and self.lr_decay_epochs[-1] >= self.train_epochs:
                raise ConfigError("lr_decay_epochs must all be < train_epochs")
            if self.kl_annealing_epochs > self.train_epochs:
                raise ConfigError("kl_annealing_epochs must be <= train_epochs")
        if self.train_epochs < 0:
            raise ConfigError("train_epochs must be >= 0")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.random_sign_init == 0:
            raise ConfigError("random_sign_init must be non-zero")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.likelihood_mode not in {m.value for m in LikelihoodMode}:
            raise ConfigError(f"likelihood_mode must be one of {[m.value for m in LikelihoodMode]}")
        for key in ("alpha_initializer", "gamma_initializer"):
            if getattr(self, key) not in INITIALIZERS:
                raise ConfigError(f"{key} must be one of {sorted(INITIALIZERS)}")
        for key in ("alpha_regularizer", "gamma_regularizer"):
            if getattr(self, key) not in REGULARIZERS:
                raise ConfigError(f"{key} must be one of {sorted(REGULARIZERS)}")
        for init, reg in ((self.alpha_initializer, self.alpha_regularizer),
                          (self.gamma_initializer, self.gamma_regularizer)):
            if INITIALIZERS[init] != REGULARIZERS[reg]:
                raise ConfigError(f"initializer {init} does not pair with regularizer {reg}")
        if self.eval_samples_per_component < 1 or self.batch_size < 1:
            raise ConfigError("eval_samples_per_component and batch_size must be >= 1")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def field_types(cls) -> Dict[str, type]:
        defaults = cls.__new__(cls)
        out = {}
        for f in dataclasses.fields(cls):
            out[f.name] = type(f.default)
        del defaults
        return out

    @classmethod
    def coerce(cls, key: str, value):
        """Convert a raw (string or literal) value to the type of field ``key``."""
        types = cls.field_types()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        if isinstance(value, str) and kind is not str:
            try:
                value = ast.literal_eval(value)
            except (ValueError, SyntaxError) as exc:
                raise ConfigError(f"cannot parse {key} = {value!r}") from exc
        if kind is tuple:
            value = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        elif kind is bool:
            if not isinstance(value, (bool, int)):
                raise ConfigError(f"{key} expects a boolean")
            value = bool(value)
        elif kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{key} expects an integer")
            value = int(value)
        elif kind is float:
            value = float(value)
        elif kind is str:
            value = str(value)
        return value

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls(**{k: cls.coerce(k, v) for k, v in values.items()})

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def replace(self, **overrides) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **overrides})


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        TrainConfig.coerce(key, raw)
        values[key] = raw
    return values


def load_config(path=None, overrides: Optional[dict] = None) -> TrainConfig:
    """Defaults, then the config file, then ``overrides`` (highest precedence)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    values.update(overrides or {})
    return TrainConfig.from_dict(values)


# -------------------------------------------------------------- initializers
def init_posterior_means(shape, random_sign_init: float, rng: np.random.Generator) -> np.ndarray:
    """Posterior means around 1.

    Positive values: each entry is -1 with probability ``random_sign_init``,
    else +1. Negative values: N(1, random_sign_init**2) per entry.
    """
    if random_sign_init == 0:
        raise ValueError("random_sign_init must be non-zero")
    if random_sign_init < 0:
        return rng.normal(1.0, -random_sign_init, size=shape)
    if random_sign_init > 1:
        raise ValueError("a sign-flip probability must be <= 1")
    return np.where(rng.uniform(size=shape) < random_sign_init, -1.0, 1.0)


def make_factor(initializer: str, regularizer: str, ensemble_size: int, dim: int,
                config: TrainConfig, rng: np.random.Generator):
    """Build (posterior, prior) mixtures for one factor vector."""
    family = INITIALIZERS[initializer]
    if REGULARIZERS[regularizer] != family:
        raise ConfigError(f"initializer {initializer} does not pair with regularizer {regularizer}")
    shape = (ensemble_size, dim)
    if initializer == "ones":
        return MixtureDistribution.create(dist.POINT, np.ones(shape), trainable=False), None
    if family == dist.LOG_GAUSSIAN:
        # log-space locations: sign flips are meaningless for a positive factor
        loc = np.log(np.abs(init_posterior_means(shape, random_sign_init=config.random_sign_init
                                                 if config.random_sign_init < 0 else -config.random_sign_init,
                                                 rng=rng)) + 1e-12)
        prior_loc = math.log(config.prior_mean)
    else:
        loc = init_posterior_means(shape, config.random_sign_init, rng)
        prior_loc = config.prior_mean
    if family == dist.POINT:
        return MixtureDistribution.create(dist.POINT, loc, trainable=True), None
    stddev = dist.dropout_to_stddev(config.dropout_rate)
    if stddev <= 0:
        raise ConfigError("stochastic factors need dropout_rate > 0")
    posterior = MixtureDistribution.create(family, loc, np.full(shape, stddev), trainable=True)
    prior = MixtureDistribution.create(family, np.full(shape, prior_loc),
                                       np.full(shape, config.prior_stddev), trainable=False)
    return posterior, prior


def build_model(config: TrainConfig, input_dim: int, num_classes: int,
                rng: np.random.Generator) -> Rank1MLP:
    """MLP of rank-1 dense layers; every layer (including the output) carries factors."""
    sizes = [input_dim, *config.hidden_units, num_classes]
    layers = []
    k = config.ensemble_size
    for i, (d, m) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        kernel_rng = np.random.default_rng(rng.integers(2**63))
        r_post, r_prior = make_factor(config.alpha_initializer, config.alpha_regularizer,
                                      k, m, config, rng)
        s_post, s_prior = make_factor(config.gamma_initializer, config.gamma_regularizer,
                                      k, d, config, rng)
        layers.append(Rank1Dense(d, m, k, r_post, s_post, r_prior, s_prior,
                                 activation=None if last else config.activation, rng=kernel_rng))
    return Rank1MLP(layers)


# ------------------------------------------------------------------ training
def lr_schedule(epoch: float, config: TrainConfig) -> float:
    """Step decay: base * ratio ** (number of decay epochs <= epoch)."""
    drops = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.base_learning_rate * config.lr_decay_ratio ** drops


class SGDMomentum:
    """v <- mu * v + g;  p <- p - lr * v."""

    def __init__(self, params: Dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.buffers = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, lr: float, clip_norm: float = 0.0) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape))
                 for k, p in self.params.items()}
        if clip_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > clip_norm:
                grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
        for k, p in self.params.items():
            v = self.momentum * self.buffers[k] + grads[k]
            self.buffers[k] = v
            p.data = p.data - lr * v
            p.grad = None


def predict_log_probs(model, x, samples_per_component: int = 1, rng=None,
                      per_example: bool = True) -> np.ndarray:
    """Member log-probabilities ``[K * S, B, C]`` (sample-major, then component)."""
    x = np.asarray(x)
    k = model.ensemble_size
    dup = data_lib.duplicate_batch(x, k)
    out = []
    with ad.no_grad():
        for _ in range(samples_per_component):
            logits = model.forward(dup, "sample", rng, per_example).data
            logits = logits.reshape(k, len(x), -1)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            out.append(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))
    return np.concatenate(out, axis=0)


def evaluate_model(model, dataset: data_lib.Dataset, samples_per_component: int,
                   rng, num_bins: int = 15, per_example: bool = True,
                   epoch: Optional[int] = None) -> MetricsReport:
    lp = predict_log_probs(model, dataset.features, samples_per_component, rng, per_example)
    return evaluate(lp, dataset.labels, num_bins, epoch)


@dataclass
class TrainResult:
    model: Rank1MLP
    history: List[MetricsReport] = field(default_factory=list)
    checkpoints: List[Checkpoint] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)


class Trainer:
    """Holds the mutable training state: parameters, momentum buffers, RNG, epoch."""

    def __init__(self, model: Rank1MLP, train_set: data_lib.Dataset, config: TrainConfig,
                 eval_set: Optional[data_lib.Dataset] = None, rng: Optional[np.random.Generator] = None):
        if model.ensemble_size != config.ensemble_size:
            raise ConfigError("model ensemble size differs from config.ensemble_size")
        if train_set.labels.size and train_set.labels.max() >= model.layers[-1].out_features:
            raise ValueError("labels exceed the model's number of classes")
        if eval_set is None:
            train_set, eval_set = data_lib.split(train_set, 0.2)
        self.model = model
        self.train_set = train_set
        self.eval_set = eval_set
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params = {k: p for k, p in model.named_parameters().items() if p.requires_grad}
        self.optimizer = SGDMomentum(self.params, config.momentum)
        self.epoch = 0
        batch = min(config.batch_size, len(train_set))
        self.elbo_config = ElboConfig(len(train_set), batch, config.l2,
                                      config.kl_annealing_epochs, config.likelihood_mode)

    def train_epoch(self) -> float:
        """One pass over the shuffled training set; returns the mean minibatch loss."""
        cfg = self.config
        lr = lr_schedule(self.epoch, cfg)
        x, y = self.train_set.features, self.train_set.labels
        perm = self.rng.permutation(len(y))
        b = self.elbo_config.batch_size
        losses = []
        for start in range(0, len(y), b):
            idx = perm[start:start + b]
            xd = data_lib.duplicate_batch(x[idx], cfg.ensemble_size)
            yd = data_lib.duplicate_batch(y[idx], cfg.ensemble_size)
            loss = elbo_loss(self.model, (xd, yd), self.epoch, self.elbo_config, self.rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(self.epoch, value)
            ad.backward(loss)
            self.optimizer.step(lr, cfg.clip_norm)
            losses.append(value)
        self.epoch += 1
        return float(np.mean(losses))

    def evaluate(self, dataset=None, samples_per_component=None, seed_offset: int = 0) -> MetricsReport:
        rng = np.random.default_rng([self.config.seed, self.epoch, 7 + seed_offset])
        return evaluate_model(self.model, dataset or self.eval_set,
                              samples_per_component or self.config.eval_samples_per_component,
                              rng, self.config.num_ece_bins, self.config.per_example_eval,
                              epoch=self.epoch)

    def fit(self, epochs: Optional[int] = None, log: Optional[Callable[[MetricsReport], None]] = None,
            checkpoint_dir=None, result: Optional[TrainResult] = None) -> TrainResult:
        """Train until ``epochs`` (default ``config.train_epochs``) epochs are done."""
        end = self.config.train_epochs if epochs is None else epochs
        result = result or TrainResult(self.model)
        interval = self.config.checkpoint_interval
        while self.epoch < end:
            result.losses.append(self.train_epoch())
            report = self.evaluate()
            result.history.append(report)
            if log is not None:
                log(report)
            logger.debug("epoch %d loss %.4f nll %.4f", self.epoch, result.losses[-1], report.nll)
            if (interval and self.epoch % interval == 0) or self.epoch == end:
                ckpt = self.checkpoint()
                result.checkpoints.append(ckpt)
                if checkpoint_dir is not None:
                    Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                    ckpt.save(Path(checkpoint_dir) / f"epoch_{self.epoch:04d}.ckpt")
        return result

    def checkpoint(self) -> Checkpoint:
        params = {k: p.data.copy() for k, p in self.model.named_parameters().items()}
        momentum = {k: v.copy() for k, v in self.optimizer.buffers.items()}
        return Checkpoint(self.epoch, params, momentum, self.rng.bit_generator.state,
                          self.config.to_dict())

    def restore(self, ckpt: Checkpoint) -> None:
        load_params(self.model, ckpt.params)
        for k in self.optimizer.buffers:
            if k in ckpt.momentum:
                self.optimizer.buffers[k] = ckpt.momentum[k].copy()
        if ckpt.rng_state:
            self.rng.bit_generator.state = ckpt.rng_state
        self.epoch = ckpt.epoch


def load_params(model, params: Dict[str, np.ndarray]) -> None:
    named = model.named_parameters()
    missing = sorted(set(named) - set(params))
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {missing}")
    for k, p in named.items():
        if params[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: checkpoint {params[k].shape}, model {p.shape}")
        p.data = np.array(params[k], dtype=np.float64)


def prepare_data(config: TrainConfig) -> Tuple[data_lib.Dataset, data_lib.Dataset]:
    """Load or generate the configured dataset; returns (train, test) scaled to [0, 1]."""
    if config.dataset in ("two_moons", "gaussians"):
        full = data_lib.synthetic(config.dataset, config.num_examples, config.noise, config.seed)
    elif config.dataset == "csv":
        full = data_lib.load_csv(config.data_path)
    elif config.dataset == "idx":
        full = data_lib.load_idx(config.data_path, config.label_path or None)
        full = data_lib.Dataset(full.features.reshape(len(full), -1), full.labels, full.name)
    else:
        raise ConfigError(f"unknown dataset {config.dataset!r}")
    train, test = data_lib.split(full, config.test_fraction)
    scale = data_lib.unit_scaler(train.features)
    return (data_lib.Dataset(scale(train.features), train.labels, train.name),
            data_lib.Dataset(scale(test.features), test.labels, test.name))


def seed_streams(seed: int):
    """Independent generators for model init and training, all derived from one seed."""
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def train(model: Rank1MLP, dataset: data_lib.Dataset, config: TrainConfig,
          eval_set: Optional[data_lib.Dataset] = None, log=None, checkpoint_dir=None,
          rng: Optional[np.random.Generator] = None) -> TrainResult:
    """Train ``model`` for ``config.train_epochs`` epochs and return the run record."""
    trainer = Trainer(model, dataset, config, eval_set, rng)
    return trainer.fit(log=log, checkpoint_dir=checkpoint_dir)


def run_experiment(config: TrainConfig, log=None, checkpoint_dir=None):
    """Data, model and training for one config; returns (trainer, result, test_set)."""
    train_set, test_set = prepare_data(config)
    init_rng, train_rng = seed_streams(config.seed)
    num_classes = max(train_set.num_classes, test_set.num_classes)
    model = build_model(config, train_set.features.shape[1], num_classes, init_rng)
    trainer = Trainer(model, train_set, config, test_set, train_rng)
    result = trainer.fit(log=log, checkpoint_dir=checkpoint_dir)
    return trainer, result, test_set


def model_from_checkpoint(ckpt: Checkpoint) -> Tuple[Rank1MLP, TrainConfig]:
    config = TrainConfig.from_dict(ckpt.config)
    train_set, test_set = prepare_data(config)
    init_rng, _ = seed_streams(config.seed)
    num_classes = max(train_set.num_classes, test_set.num_classes)
    model = build_model(config, train_set.features.shape[1], num_classes, init_rng)
    load_params(model, ckpt.params)
    return model, config
