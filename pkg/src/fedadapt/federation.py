"""Federated round loop: local adversarial training, parameter averaging,
broadcast, evaluation, and communication accounting.

Every client trains its mask network with the contrastive objective plus,
when enabled, the reversed domain loss against a shared unlabeled target
pool; the server averages the flattened mask-network vectors each round.
Per-client RNG streams are derived from (seed, client_id, round) so serial
and threaded execution produce identical results.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedadapt import adversary, fam, losses, metrics
from fedadapt.data import EmbeddingDataset, split_train_val_test
from fedadapt.numerics import AdamConfig, adam_step


@dataclass
class FLRunConfig:
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 32
    da_weight: float = 0.5
    tau: float = losses.DEFAULT_TAU
    enable_da: bool = True
    share_dc: bool = False
    local_bn: bool = False
    fam_variant: str = "standard"
    fam_hidden: int = 0
    dc_hidden1: int = 512
    dc_hidden2: int = 256
    adam: AdamConfig = field(default_factory=AdamConfig)
    split_ratios: tuple = (0.6, 0.2, 0.2)
    ece_bins: int = metrics.DEFAULT_ECE_BINS
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.da_weight < 0.0:
            raise ValueError("da_weight must be non-negative")
        if not self.tau > 0.0:
            raise ValueError("tau must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.adam.validate()


@dataclass
class ClientState:
    client_id: int
    fam_params: fam.FamParams
    dc_params: adversary.DcParams
    train: EmbeddingDataset
    val: EmbeddingDataset
    test: EmbeddingDataset
    target_features: np.ndarray  # shared unlabeled pool, float64 rows


@dataclass
class ServerState:
    global_fam_vector: np.ndarray
    round_index: int
    comm_ledger: "CommLedger"


class CommLedger:
    """Per-round transmitted-parameter counts, up and down."""

    def __init__(self, fam_count: int, dc_count: int, share_dc: bool, n_clients: int):
        self.fam_count = fam_count
        self.dc_count = dc_count
        self.share_dc = share_dc
        self.n_clients = n_clients
        self.uploaded = []
        self.downloaded = []
        self.wall_s = []

    def per_client_payload(self) -> int:
        return self.fam_count + (self.dc_count if self.share_dc else 0)

    def record_round(self, wall_s: float) -> None:
        payload = self.per_client_payload() * self.n_clients
        self.uploaded.append(payload)
        self.downloaded.append(payload)
        self.wall_s.append(wall_s)

    def snapshot(self) -> dict:
        return {
            "round_uploaded": self.uploaded[-1] if self.uploaded else 0,
            "round_downloaded": self.downloaded[-1] if self.downloaded else 0,
            "cumulative_uploaded": int(sum(self.uploaded)),
            "cumulative_downloaded": int(sum(self.downloaded)),
        }


def aggregate(vectors) -> np.ndarray:
    """Unweighted elementwise mean of equal-length parameter vectors.

    Summation runs over per-coordinate sorted values, so the result is
    bitwise independent of client order; coordinates on which all clients
    agree pass through unchanged.
    """
    if len(vectors) == 0:
        raise ValueError("cannot aggregate an empty vector list")
    stack = np.ascontiguousarray(np.stack([np.asarray(v, dtype=np.float64)
                                           for v in vectors]))
    if stack.ndim != 2:
        raise ValueError("vectors must be 1-D and of equal length")
    if stack.shape[0] == 1:
        return stack[0].copy()
    ordered = np.sort(stack, axis=0)
    mean = ordered.sum(axis=0) / stack.shape[0]
    return np.where(ordered[0] == ordered[-1], ordered[0], mean)


def broadcast(server: ServerState, clients, local_bn: bool = False) -> None:
    """Overwrite every client's mask-network values with the global vector;
    batchnorm-owned segments are skipped when local_bn is set."""
    for client in clients:
        fam.load_vector(client.fam_params, server.global_fam_vector, skip_bn=local_bn)


def _client_rng(cfg: FLRunConfig, client_id: int, round_index: int):
    return np.random.default_rng([cfg.seed, client_id, round_index])


def da_active(cfg: FLRunConfig) -> bool:
    """The adversarial term runs only when enabled with positive weight, so
    da_weight=0 and enable_da=False take the same code path bit for bit."""
    return cfg.enable_da and cfg.da_weight > 0.0


def local_train_epoch(client: ClientState, cfg: FLRunConfig, rng) -> dict:
    """One pass over the client's shuffled train split.

    Per minibatch: contrastive loss of masked features against the prompt
    rows of the batch labels; when adversarial adaptation is active, a
    balanced domain batch against freshly drawn target rows, with the
    discriminator gradient reversed into the mask network; then one Adam
    step per parameter block. Trailing batches of fewer than 2 samples are
    dropped (train-mode batchnorm needs 2 rows)."""
    ds = client.train
    n = len(ds)
    if n < 2:
        raise ValueError(f"client {client.client_id}: train split needs >= 2 samples")
    prompt_bank = ds.prompt_bank.astype(np.float64)
    order = rng.permutation(n)
    use_da = da_active(cfg)
    contrastive_sum = 0.0
    da_sum = 0.0
    n_batches = 0
    for start in range(0, n, cfg.batch_size):
        batch_idx = order[start:start + cfg.batch_size]
        if batch_idx.size < 2:
            continue
        feats = ds.features[batch_idx].astype(np.float64)
        prompts = prompt_bank[ds.labels[batch_idx]]
        masked, cache_s = fam.masked_forward(client.fam_params, feats, "train")
        sim, cos_cache = losses.cosine_similarity_forward(masked, prompts)
        loss_c, d_sim = losses.contrastive_loss(sim, cfg.tau)
        d_masked, _ = losses.cosine_similarity_backward(d_sim, cos_cache)
        if use_da:
            pool = client.target_features
            tgt_idx = rng.integers(0, pool.shape[0], size=batch_idx.size)
            tgt = pool[tgt_idx]
            masked_t, cache_t = fam.masked_forward(client.fam_params, tgt, "train")
            domain_batch = adversary.make_domain_batch(masked, masked_t)
            loss_da, _ = adversary.adversarial_backprop(
                client.fam_params, client.dc_params, domain_batch,
                [cache_s, cache_t], cfg.da_weight)
            da_sum += loss_da
        fam.fam_backward(client.fam_params, cache_s, d_masked)
        for _, block in client.fam_params.trainable_blocks():
            adam_step(block, cfg.adam)
        if use_da:
            for _, block in client.dc_params.trainable_blocks():
                adam_step(block, cfg.adam)
        contrastive_sum += loss_c
        n_batches += 1
    if n_batches == 0:
        raise ValueError(f"client {client.client_id}: no usable minibatch")
    return {
        "contrastive": contrastive_sum / n_batches,
        "da": (da_sum / n_batches) if use_da else None,
        "batches": n_batches,
    }


def _train_client_round(client: ClientState, cfg: FLRunConfig, round_index: int) -> dict:
    rng = _client_rng(cfg, client.client_id, round_index)
    stats = [local_train_epoch(client, cfg, rng) for _ in range(cfg.local_epochs)]
    return {
        "contrastive": float(np.mean([s["contrastive"] for s in stats])),
        "da": (float(np.mean([s["da"] for s in stats]))
               if stats[0]["da"] is not None else None),
    }


def evaluate(fam_params: fam.FamParams, dataset: EmbeddingDataset,
             tau: float = losses.DEFAULT_TAU, chunk: int = 4096) -> metrics.EvalRecords:
    """Eval-mode masked features scored against the dataset's prompt bank."""
    if dataset.prompt_bank is None:
        raise ValueError("dataset has no prompt bank to classify against")
    prompts = dataset.prompt_bank.astype(np.float64)
    prob_rows = []
    for start in range(0, len(dataset), chunk):
        feats = dataset.features[start:start + chunk].astype(np.float64)
        masked, _ = fam.masked_forward(fam_params, feats, "eval")
        sim = losses.cosine_similarity(masked, prompts)
        prob_rows.append(losses.class_probabilities(sim, tau))
    return metrics.EvalRecords(dataset.labels.copy(), np.vstack(prob_rows))


def split_metrics(records: metrics.EvalRecords, ece_bins: int) -> dict:
    """ACC/BACC/macro-F1/AUC/ECE for one evaluated split; AUC is null when
    no class has both positives and negatives."""
    try:
        auc, _ = metrics.roc_auc_macro(records)
    except ValueError:
        auc = None
    return {
        "acc": metrics.accuracy(records),
        "bacc": metrics.balanced_accuracy(records),
        "macro_f1": metrics.macro_f1(records),
        "auc": auc,
        "ece": metrics.ece(records, ece_bins)[0],
    }


@dataclass
class RoundRecord:
    round_index: int
    clients: list
    target: dict
    train_loss: dict
    comm: dict
    wall_s: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "clients": self.clients,
            "target": self.target,
            "train_loss": self.train_loss,
            "comm": self.comm,
            "wall_s": self.wall_s,
        }


@dataclass
class RunResult:
    rounds: list                 # RoundRecord per round, index 0 = init
    summary: dict
    final_vector: np.ndarray
    best_vector: np.ndarray
    best_target_records: metrics.EvalRecords
    ledger: CommLedger


def build_clients(cfg: FLRunConfig, client_datasets, target_pool: EmbeddingDataset):
    """Split each client dataset 60/20/20 (configurable) and initialize
    per-client states from a common global mask network."""
    if not client_datasets:
        raise ValueError("at least one client dataset required")
    dim = target_pool.feature_dim
    k = target_pool.n_classes
    for i, ds in enumerate(client_datasets):
        if ds.feature_dim != dim:
            raise ValueError(f"client {i}: feature_dim {ds.feature_dim} != {dim}")
        if ds.n_classes != k:
            raise ValueError(f"client {i}: class count {ds.n_classes} != {k}")
        if ds.prompt_bank is None:
            raise ValueError(f"client {i}: dataset has no prompt bank")
    fam_cfg = fam.FamConfig(dim, cfg.fam_hidden, cfg.fam_variant)
    dc_cfg = adversary.DcConfig(dim, cfg.dc_hidden1, cfg.dc_hidden2)
    global_params = fam.FamParams.init(fam_cfg, seed=[cfg.seed, 0])
    global_vector = fam.to_vector(global_params)
    target_features = target_pool.features.astype(np.float64)
    clients = []
    for i, ds in enumerate(client_datasets):
        train_idx, val_idx, test_idx = split_train_val_test(
            np.arange(len(ds)), cfg.split_ratios, seed=[cfg.seed, 1, i])
        clients.append(ClientState(
            client_id=i,
            fam_params=fam.from_vector(fam_cfg, global_vector),
            dc_params=adversary.DcParams.init(dc_cfg, seed=[cfg.seed, 2, i]),
            train=ds.subset(train_idx),
            val=ds.subset(val_idx),
            test=ds.subset(test_idx),
            target_features=target_features,
        ))
    server = ServerState(
        global_fam_vector=global_vector,
        round_index=0,
        comm_ledger=CommLedger(fam.fam_param_count(fam_cfg),
                               adversary.dc_param_count(dc_cfg),
                               cfg.share_dc, len(clients)),
    )
    return server, clients, fam_cfg, dc_cfg


def _evaluate_round(server, clients, cfg, fam_cfg, target_pool, round_index,
                    train_stats, wall_s):
    global_params = fam.from_vector(fam_cfg, server.global_fam_vector)

    def eval_split(params, split):
        if len(split) == 0:
            return None
        return split_metrics(evaluate(params, split, cfg.tau), cfg.ece_bins)

    client_rows = []
    for client in clients:
        client_rows.append({
            "client_id": client.client_id,
            "test": eval_split(client.fam_params, client.test),
            "val": eval_split(client.fam_params, client.val),
        })
    target_records = evaluate(global_params, target_pool, cfg.tau)
    record = RoundRecord(
        round_index=round_index,
        clients=client_rows,
        target=split_metrics(target_records, cfg.ece_bins),
        train_loss=train_stats,
        comm=server.comm_ledger.snapshot(),
        wall_s=wall_s,
    )
    return record, target_records


def run_federated(cfg: FLRunConfig, client_datasets, target_pool: EmbeddingDataset,
                  progress=None) -> RunResult:
    """Fixed-round federated training; returns per-round records, the final
    and best global vectors, and the communication ledger.

    Round record 0 evaluates the common initialization; record r evaluates
    the state after aggregation round r. The best round maximizes accuracy
    on the held-out target split."""
    cfg.validate()
    server, clients, fam_cfg, dc_cfg = build_clients(cfg, client_datasets, target_pool)
    no_loss = {"contrastive": None, "da": None}
    record, target_records = _evaluate_round(
        server, clients, cfg, fam_cfg, target_pool, 0, no_loss, 0.0)
    rounds = [record]
    best = {
        "round": 0,
        "acc": record.target["acc"],
        "vector": server.global_fam_vector.copy(),
        "records": target_records,
    }
    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        ordered = sorted(clients, key=lambda c: c.client_id)
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                stats = list(pool.map(
                    lambda c: _train_client_round(c, cfg, r), ordered))
        else:
            stats = [_train_client_round(c, cfg, r) for c in ordered]
        fam_vectors = [fam.to_vector(c.fam_params) for c in ordered]
        server.global_fam_vector = aggregate(fam_vectors)
        server.round_index = r
        if cfg.share_dc:
            dc_vector = aggregate([adversary.dc_to_vector(c.dc_params)
                                   for c in ordered])
            for client in clients:
                adversary.dc_load_vector(client.dc_params, dc_vector)
        broadcast(server, clients, cfg.local_bn)
        wall_s = time.perf_counter() - t0
        server.comm_ledger.record_round(wall_s)
        da_losses = [s["da"] for s in stats]
        train_stats = {
            "contrastive": float(np.mean([s["contrastive"] for s in stats])),
            "da": (float(np.mean(da_losses)) if da_losses[0] is not None else None),
        }
        record, target_records = _evaluate_round(
            server, clients, cfg, fam_cfg, target_pool, r, train_stats, wall_s)
        rounds.append(record)
        if record.target["acc"] > best["acc"]:
            best = {
                "round": r,
                "acc": record.target["acc"],
                "vector": server.global_fam_vector.copy(),
                "records": target_records,
            }
        if progress is not None:
            progress(record)
    summary = _summarize(rounds, best, server.comm_ledger)
    return RunResult(
        rounds=rounds,
        summary=summary,
        final_vector=server.global_fam_vector,
        best_vector=best["vector"],
        best_target_records=best["records"],
        ledger=server.comm_ledger,
    )


def _best_by(rows, key):
    best_idx = None
    for i, row in enumerate(rows):
        if row is None or row.get(key) is None:
            continue
        if best_idx is None or row[key] > rows[best_idx][key]:
            best_idx = i
    return best_idx


def _summarize(rounds, best, ledger: CommLedger) -> dict:
    target_rows = [r.target for r in rounds]
    best_target = _best_by(target_rows, "acc")
    client_ids = [c["client_id"] for c in rounds[0].clients]
    per_client = {}
    for cid in client_ids:
        rows = [next(c["test"] for c in r.clients if c["client_id"] == cid)
                for r in rounds]
        idx = _best_by(rows, "acc")
        per_client[str(cid)] = (None if idx is None
                                else {"best_round": idx, **rows[idx]})
    mean_rows = []
    for r in rounds:
        accs = [c["test"]["acc"] for c in r.clients if c["test"] is not None]
        mean_rows.append({"acc": float(np.mean(accs))} if accs else None)
    best_mean = _best_by(mean_rows, "acc")
    return {
        "rounds": len(rounds) - 1,
        "target": {"best_round": best_target, **rounds[best_target].target},
        "clients_mean_test_acc": (None if best_mean is None else
                                  {"best_round": best_mean,
                                   "acc": mean_rows[best_mean]["acc"]}),
        "per_client_test": per_client,
        "best_checkpoint_round": best["round"],
        "comm": ledger.snapshot(),
        "fam_params": ledger.fam_count,
        "dc_params": ledger.dc_count,
    }
