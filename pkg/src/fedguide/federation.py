"""Round orchestration: participation sampling, warm-up, client work,
aggregation, server update, and checkpointing.

Each client's randomness comes from a private stream keyed by
(seed, purpose, client, round), so rounds can run on any number of worker
threads and still produce bit-identical results; the server reduces uploads
in ascending client order at the end of the round.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .baselines import (
    PrototypeSet,
    aggregate_prototypes,
    empty_prototypes,
    local_prototypes,
    prototype_loss_config,
)
from .data import (
    ClientDataset,
    Dataset,
    DelimitedSchema,
    generate_synthetic,
    load_delimited,
    partition_dirichlet,
    partition_pathological,
    split_client,
)
from .errors import CheckpointError, ConfigError, ContractViolation
from .guidance import (
    GuidanceGradient,
    GuidingVectorSet,
    add_privacy_noise,
    guidance_gradient,
    guided_loss_config,
    init_guiding_vectors,
    local_train_epoch,
    server_update,
)
from .metrics import RoundMetrics, account_bytes, evaluate
from .nn import (
    LossConfig,
    MiniBatch,
    ModelParams,
    ModelSpec,
    family_spec,
    grad_params,
    init_params,
    params_from_flat,
    run_sgd_epoch,
)

METHODS = ("fedl2g-l", "fedl2g-f", "fedproto", "feddistill", "local-only")
GUIDED_METHODS = ("fedl2g-l", "fedl2g-f")
PROTO_METHODS = ("fedproto", "feddistill")

# Space defaults for the server learning rate; scaled by RunConfig.eta_s_scale
# because the desk-scale vector dimensions are far below production ones.
DEFAULT_ETA_S = {"logit": 0.1, "feature": 100.0}


def method_space(method: str) -> str | None:
    if method in ("fedl2g-l", "feddistill"):
        return "logit"
    if method in ("fedl2g-f", "fedproto"):
        return "feature"
    return None


@dataclass(frozen=True)
class TaskConfig:
    """Dataset source and partition scheme."""

    source: str = "synthetic"  # "synthetic" or a delimited-file path
    class_count: int = 10
    input_dim: int = 32
    samples_per_class: int = 200
    cluster_spread: float = 0.75
    partition: str = "dirichlet"  # or "pathological"
    beta: float = 0.1
    classes_per_client: int = 2
    test_fraction: float = 0.25

    def validate(self):
        if self.partition not in ("dirichlet", "pathological"):
            raise ConfigError(f"partition: unknown scheme {self.partition!r}")
        if self.partition == "dirichlet" and self.beta <= 0:
            raise ConfigError("beta: must be > 0")
        if self.partition == "pathological" and self.classes_per_client < 1:
            raise ConfigError("classes_per_client: must be >= 1")
        if self.source == "synthetic":
            if min(self.class_count, self.input_dim, self.samples_per_class) < 1:
                raise ConfigError("synthetic dataset dimensions must be positive")
            if self.cluster_spread < 0:
                raise ConfigError("cluster_spread: must be >= 0")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction: must be in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run depends on (with the task embedded)."""

    method: str = "fedl2g-f"
    n_clients: int = 20
    rho: float = 1.0
    rounds: int = 200
    warmup: int = 50
    eta_c: float = 0.01
    eta_s: float | None = None  # None -> space default times eta_s_scale
    eta_s_scale: float = 1.0
    batch_size: int = 10
    quiz_size: int = 10
    seed: int = 1
    feature_dim: int = 32
    activation: str = "relu"
    noise_s: float = 0.0
    noise_p: float = 0.0
    workers: int = 1  # execution detail; never affects results
    eval_every: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown method {self.method!r}")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho: must satisfy 0 < rho <= 1")
        if not 0 <= self.warmup < self.rounds:
            raise ConfigError("warmup: must satisfy 0 <= warmup < rounds")
        if self.eta_c <= 0:
            raise ConfigError("eta_c: must be > 0")
        if self.eta_s is not None and self.eta_s <= 0:
            raise ConfigError("eta_s: must be > 0")
        if self.eta_s_scale <= 0:
            raise ConfigError("eta_s_scale: must be > 0")
        if self.n_clients < 2:
            raise ConfigError("n_clients: must be >= 2")
        if self.batch_size < 1 or self.quiz_size < 1:
            raise ConfigError("batch_size and quiz_size must be >= 1")
        if self.noise_s < 0 or not 0 <= self.noise_p <= 1:
            raise ConfigError("noise: need s >= 0 and 0 <= p <= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        self.task.validate()

    @property
    def space(self) -> str | None:
        return method_space(self.method)

    @property
    def vector_dim(self) -> int:
        space = self.space
        if space == "logit":
            return self.task.class_count
        return self.feature_dim

    @property
    def eta_s_effective(self) -> float:
        if self.eta_s is not None:
            return self.eta_s
        space = self.space
        if space is None:
            return 0.0
        return DEFAULT_ETA_S[space] * self.eta_s_scale


def config_digest(config: RunConfig, include_seed: bool = True) -> str:
    """Stable hash of the run configuration (execution details excluded)."""
    payload = asdict(config)
    payload.pop("workers")
    if not include_seed:
        payload.pop("seed")
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def task_digest(config: RunConfig) -> str:
    """Hash of the data/partition side only; methods sharing it are comparable."""
    payload = asdict(config.task)
    payload.update(
        n_clients=config.n_clients,
        rho=config.rho,
        rounds=config.rounds,
        batch_size=config.batch_size,
        quiz_size=config.quiz_size,
        feature_dim=config.feature_dim,
        activation=config.activation,
    )
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ClientState:
    """One client's fixed architecture, current parameters, and local data."""

    index: int
    spec: ModelSpec
    params: ModelParams
    data: ClientDataset


@dataclass
class ServerState:
    """Server-side payload and round counter; a new one is built each round."""

    seed: int
    method: str
    t: int  # completed rounds
    payload: GuidingVectorSet | PrototypeSet | None
    min_ce: float = np.inf  # running minimum of mean study ce, for loss-increase


def build_dataset(config: RunConfig) -> Dataset:
    task = config.task
    if task.source == "synthetic":
        return generate_synthetic(
            task.class_count,
            task.input_dim,
            task.samples_per_class,
            task.cluster_spread,
            config.seed,
        )
    schema = DelimitedSchema(task.input_dim, task.class_count)
    return load_delimited(task.source, schema)


def build_clients(config: RunConfig) -> list[ClientState]:
    """Materialize the federation: dataset, partition, splits, seeded models."""
    config.validate()
    ds = build_dataset(config)
    task = config.task
    min_per_client = 2 * config.quiz_size
    if task.partition == "dirichlet":
        plan = partition_dirichlet(
            ds, config.n_clients, task.beta, config.seed, min_per_client
        )
    else:
        plan = partition_pathological(
            ds, config.n_clients, task.classes_per_client, config.seed, min_per_client
        )
    clients = []
    for i in range(config.n_clients):
        shard = ds.subset(plan.client_indices(i))
        data = split_client(shard, task.test_fraction, config.quiz_size, config.seed, i)
        spec = family_spec(
            i, task.input_dim, config.feature_dim, task.class_count, config.activation
        )
        params = init_params(spec, rngmod.stream(config.seed, rngmod.MODEL_INIT, i))
        clients.append(ClientState(i, spec, params, data))
    return clients


def build_server(config: RunConfig) -> ServerState:
    space = config.space
    if config.method in GUIDED_METHODS:
        payload = init_guiding_vectors(
            config.task.class_count, config.vector_dim, space, config.seed
        )
    elif config.method in PROTO_METHODS:
        payload = empty_prototypes(config.task.class_count, config.vector_dim, space)
    else:
        payload = None
    return ServerState(config.seed, config.method, 0, payload)


def sample_participants(server: ServerState, n_clients: int, rho: float) -> list[int]:
    """Uniform subset of size round(rho * N), at least 1, for the coming round."""
    k = min(n_clients, max(1, int(round(rho * n_clients))))
    gen = rngmod.stream(server.seed, rngmod.PARTICIPATION, server.t + 1)
    chosen = gen.choice(n_clients, size=k, replace=False)
    return sorted(int(i) for i in chosen)


@dataclass
class _ClientResult:
    index: int
    params: ModelParams
    upload: GuidanceGradient | tuple[np.ndarray, np.ndarray] | None
    grad_norm_sq: float


def _sample_batch(study: Dataset, batch_size: int, gen: np.random.Generator) -> MiniBatch:
    k = min(batch_size, len(study))
    idx = gen.choice(len(study), size=k, replace=False)
    return MiniBatch(study.inputs[idx], study.labels[idx])


def _client_work(
    config: RunConfig,
    payload: GuidingVectorSet | PrototypeSet | None,
    client: ClientState,
    round_index: int,
) -> _ClientResult:
    """All of one participant's work for a round. Pure in its arguments."""
    seed = config.seed
    i = client.index
    spec, params, data = client.spec, client.params, client.data
    epoch_rng = rngmod.stream(seed, rngmod.EPOCH, i, round_index)
    batch_rng = rngmod.stream(seed, rngmod.BATCH, i, round_index)

    if config.method in GUIDED_METHODS:
        gset: GuidingVectorSet = payload
        if round_index > config.warmup:
            params = local_train_epoch(
                spec, params, data.study, gset, config.eta_c, epoch_rng, config.batch_size
            )
        batch = _sample_batch(data.study, config.batch_size, batch_rng)
        loss_cfg = guided_loss_config(gset)
        g = grad_params(spec, params, batch, loss_cfg)
        upload = guidance_gradient(spec, params, batch, data.quiz, gset, config.eta_c)
        if config.noise_s > 0 and config.noise_p > 0:
            noise_rng = rngmod.stream(seed, rngmod.NOISE, i, round_index)
            upload = add_privacy_noise(upload, config.noise_s, config.noise_p, noise_rng)
    elif config.method in PROTO_METHODS:
        pset: PrototypeSet = payload
        loss_cfg = prototype_loss_config(pset)
        params = run_sgd_epoch(
            spec,
            params,
            data.study.inputs,
            data.study.labels,
            loss_cfg,
            config.eta_c,
            config.batch_size,
            epoch_rng,
        )
        batch = _sample_batch(data.study, config.batch_size, batch_rng)
        g = grad_params(spec, params, batch, loss_cfg)
        upload = local_prototypes(spec, params, data.study, config.space)
    else:  # local-only
        loss_cfg = LossConfig(use_ce=True)
        params = run_sgd_epoch(
            spec,
            params,
            data.study.inputs,
            data.study.labels,
            loss_cfg,
            config.eta_c,
            config.batch_size,
            epoch_rng,
        )
        batch = _sample_batch(data.study, config.batch_size, batch_rng)
        g = grad_params(spec, params, batch, loss_cfg)
        upload = None

    return _ClientResult(i, params, upload, float(g @ g))


def run_round(
    server: ServerState,
    clients: list[ClientState],
    config: RunConfig,
    eval_cache: tuple[float, np.ndarray, float] | None = None,
) -> tuple[ServerState, RoundMetrics]:
    """Execute one communication round; mutates participants' params in place.

    ``eval_cache`` carries the previous evaluation for rounds that skip it
    (eval_every > 1).
    """
    start = time.perf_counter()
    round_index = server.t + 1
    if round_index > config.rounds:
        raise ContractViolation("run_round called past the configured horizon")
    participants = sample_participants(server, config.n_clients, config.rho)

    def work(i: int) -> _ClientResult:
        try:
            return _client_work(config, server.payload, clients[i], round_index)
        except Exception as exc:
            raise ContractViolation(f"client {i} failed in round {round_index}: {exc}") from exc

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, participants))
    else:
        results = [work(i) for i in participants]
    results.sort(key=lambda r: r.index)

    for r in results:
        clients[r.index].params = r.params

    # Deterministic ordered reduction at the synchronization barrier.
    payload = server.payload
    upload_rows = 0
    if config.method in GUIDED_METHODS:
        grads = [r.upload for r in results]
        upload_rows = sum(g.uploaded_rows for g in grads)
        payload = server_update(payload, grads, config.eta_s_effective)
    elif config.method in PROTO_METHODS:
        locals_ = [r.upload for r in results]
        upload_rows = sum(int((c > 0).sum()) for _, c in locals_)
        payload = aggregate_prototypes(locals_, config.space)

    upload_bytes, download_bytes = account_bytes(
        len(participants),
        upload_rows,
        config.task.class_count,
        config.vector_dim if config.space else 0,
        config.method,
    )

    if round_index % config.eval_every == 0 or round_index == config.rounds or eval_cache is None:
        accuracy, per_client, mean_ce = evaluate(
            [(c.spec, c.params, c.data) for c in clients]
        )
    else:
        accuracy, per_client, mean_ce = eval_cache

    inc = 0.0 if not np.isfinite(server.min_ce) else max(0.0, mean_ce - server.min_ce)
    new_min = min(server.min_ce, mean_ce)

    grad_norm_sq = float(np.mean([r.grad_norm_sq for r in results]))
    metrics = RoundMetrics(
        round_index=round_index,
        accuracy=accuracy,
        per_client_accuracy=per_client,
        mean_ce=mean_ce,
        loss_increase=inc,
        upload_bytes=upload_bytes,
        download_bytes=download_bytes,
        grad_norm_sq=grad_norm_sq,
        n_participants=len(participants),
        upload_rows=upload_rows,
        wall_time=time.perf_counter() - start,
    )
    new_server = ServerState(server.seed, server.method, round_index, payload, new_min)
    return new_server, metrics


@dataclass
class TrainingResult:
    config: RunConfig
    history: list[RoundMetrics]
    server: ServerState
    clients: list[ClientState]


def run_training(
    config: RunConfig,
    resume_from: str | None = None,
    checkpoint_at: int | None = None,
    checkpoint_path: str | None = None,
) -> TrainingResult:
    """Run rounds 1..T (or resume at a checkpoint's round) and collect metrics.

    With ``checkpoint_at``/``checkpoint_path`` set, a snapshot is written
    after that round completes. Resuming reproduces the remaining rounds
    bit-exactly because all randomness is keyed by (seed, client, round).
    """
    config.validate()
    clients = build_clients(config)
    if resume_from is not None:
        server = load_checkpoint(resume_from, config, clients)
    else:
        server = build_server(config)
    history: list[RoundMetrics] = []
    eval_cache = None
    while server.t < config.rounds:
        server, metrics = run_round(server, clients, config, eval_cache)
        eval_cache = (metrics.accuracy, metrics.per_client_accuracy, metrics.mean_ce)
        history.append(metrics)
        if checkpoint_at is not None and server.t == checkpoint_at:
            if checkpoint_path is None:
                raise ConfigError("checkpoint_path: required when checkpoint_at is set")
            save_checkpoint(checkpoint_path, config, server, clients)
    return TrainingResult(config, history, server, clients)


# ---------------------------------------------------------------------------
# Checkpoint format (version 1, all integers/floats little-endian):
#   magic "FGCK" | u32 version | u64 seed | u64 completed_rounds
#   f64 min_ce (inf when unset)
#   u16 digest_len | digest bytes (config digest, seed included)
#   u8 payload_kind (0 none, 1 guiding vectors, 2 prototypes)
#     kind 1: u64 version | u64 C | u64 M | C*M f64
#     kind 2: u64 C | u64 M | C u64 counts | C*M f64
#   u64 n_clients, then per client: u64 param_count | that many f64
# ---------------------------------------------------------------------------

_MAGIC = b"FGCK"
_CKPT_VERSION = 1


def save_checkpoint(
    path: str, config: RunConfig, server: ServerState, clients: list[ClientState]
):
    digest = config_digest(config).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQQd", _CKPT_VERSION, config.seed, server.t, server.min_ce))
        fh.write(struct.pack("<H", len(digest)))
        fh.write(digest)
        payload = server.payload
        if payload is None:
            fh.write(struct.pack("<B", 0))
        elif isinstance(payload, GuidingVectorSet):
            c, m = payload.vectors.shape
            fh.write(struct.pack("<BQQQ", 1, payload.version, c, m))
            fh.write(payload.vectors.astype("<f8").tobytes())
        else:
            c, m = payload.vectors.shape
            fh.write(struct.pack("<BQQ", 2, c, m))
            fh.write(payload.counts.astype("<u8").tobytes())
            fh.write(payload.vectors.astype("<f8").tobytes())
        fh.write(struct.pack("<Q", len(clients)))
        for client in clients:
            flat = client.params.flat
            fh.write(struct.pack("<Q", flat.shape[0]))
            fh.write(flat.astype("<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def load_checkpoint(path: str, config: RunConfig, clients: list[ClientState]) -> ServerState:
    """Restore server state and client params in place; returns the server."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, seed, t, min_ce = struct.unpack("<IQQd", _read_exact(fh, 28))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (digest_len,) = struct.unpack("<H", _read_exact(fh, 2))
        digest = _read_exact(fh, digest_len).decode()
        if digest != config_digest(config):
            raise CheckpointError(
                f"{path}: checkpoint was written by a different configuration"
            )
        if seed != config.seed:
            raise CheckpointError(f"{path}: seed mismatch")
        (kind,) = struct.unpack("<B", _read_exact(fh, 1))
        payload: GuidingVectorSet | PrototypeSet | None
        if kind == 0:
            payload = None
        elif kind == 1:
            gv_version, c, m = struct.unpack("<QQQ", _read_exact(fh, 24))
            vectors = np.frombuffer(_read_exact(fh, 8 * c * m), dtype="<f8").reshape(c, m)
            payload = GuidingVectorSet(vectors.copy(), method_space(config.method), gv_version)
        elif kind == 2:
            c, m = struct.unpack("<QQ", _read_exact(fh, 16))
            counts = np.frombuffer(_read_exact(fh, 8 * c), dtype="<u8").astype(np.int64)
            vectors = np.frombuffer(_read_exact(fh, 8 * c * m), dtype="<f8").reshape(c, m)
            payload = PrototypeSet(vectors.copy(), counts, method_space(config.method))
        else:
            raise CheckpointError(f"{path}: unknown payload kind {kind}")
        (n_clients,) = struct.unpack("<Q", _read_exact(fh, 8))
        if n_clients != len(clients):
            raise CheckpointError(f"{path}: client count mismatch")
        for client in clients:
            (p,) = struct.unpack("<Q", _read_exact(fh, 8))
            flat = np.frombuffer(_read_exact(fh, 8 * p), dtype="<f8")
            client.params = params_from_flat(client.spec, flat.copy())
    return ServerState(seed, config.method, t, payload, min_ce)
