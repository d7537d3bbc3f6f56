"""The continual-learning loop: replay, classifier, prototypes, diffusion, evaluation.

Per task t the stages run in a fixed order:

1. (t >= 2) generate replay for all earlier classes from the diffusion
   model as it stood at the end of task t - 1;
2. train the classifier on D^t plus the replay;
3. initialise prototypes for the new classes from the just-trained classifier;
4. train the denoiser and the new prototypes on D^t plus the replay;
5. evaluate the classifier on every task seen so far.

``finetuning`` skips 1, 3 and 4; ``no_prototype_gr`` replaces prototypes
by a zero channel.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .classifier import accuracy, make_classifier
from .conditioning import (EmbeddingTable, PrototypeStore, ZeroPrototypes, init_prototype,
                           nearest_previous_class)
from .config import ExperimentConfig
from .data import TaskData, TaskStream
from .denoiser import make_denoiser
from .errors import ConfigError, ContractViolation, NumericError, StageError
from .eval import AccuracyMatrix, frechet_details
from .losses import classifier_loss, de_loss, dm_loss, draw_noise, total_loss
from .rng import derive_seed, torch_stream
from .sampler import GuidanceConfig, ReplayMemory, generate_replay
from .schedule import build_schedule

log = logging.getLogger(__name__)


def params_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _union(data: TaskData, memory: ReplayMemory | None, purpose: str):
    x, y = data.read(purpose)
    if memory is not None and len(memory):
        x = torch.cat([x, memory.x.to(x.dtype)])
        y = torch.cat([y, memory.y])
    return x, y


def train_classifier_task(classifier, data: TaskData, memory: ReplayMemory | None, cfg,
                          rng: torch.Generator):
    """SGD on D^t together with the replay memory, reshuffled every epoch."""
    if len(data) == 0:
        raise ConfigError(f"task {data.task} has no training data")
    x, y = _union(data, memory, "classifier")
    opt = torch.optim.SGD(classifier.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    classifier.train()
    n = len(y)
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=rng)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = classifier_loss(classifier, x[idx], y[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"task {data.task}: classifier loss became {loss.item()}")
            loss.backward()
            opt.step()
    classifier.eval()
    return classifier


def build_neighbors(table: EmbeddingTable, current, previous) -> dict[int, int]:
    """Nearest earlier class for each current class; classes without candidates are left out."""
    candidates = sorted(set(previous) - set(current))
    if not candidates:
        return {}
    return {int(y): nearest_previous_class(table, y, candidates) for y in current}


def train_diffusion_task(denoiser, prototypes, data: TaskData, memory: ReplayMemory | None,
                         schedule, table, neighbors: dict, cfg, steps: int, rng: torch.Generator,
                         record=None):
    """Optimise the denoiser and the trainable prototypes on L_DM + gamma L_DE.

    The DE term only covers samples whose class has a neighbour; with
    ``gamma == 0`` it is not evaluated and logged as 0.
    """
    current = {int(c) for c in data.y.unique().tolist()}
    missing = [c for c in current if c not in prototypes]
    if missing:
        raise ContractViolation(f"classes {missing} have no initialised prototype")
    x, y = _union(data, memory, "diffusion")
    groups = [{"params": list(denoiser.parameters()), "lr": cfg.lr, "weight_decay": cfg.weight_decay}]
    proto_params = prototypes.trainable_parameters()
    if proto_params:
        groups.append({"params": proto_params, "lr": prototypes.lr,
                       "weight_decay": prototypes.weight_decay})
    opt = torch.optim.AdamW(groups)
    clip = [p for g in groups for p in g["params"]]
    nb_ids = torch.tensor(sorted(neighbors), dtype=torch.long)
    use_de = cfg.gamma > 0 and len(nb_ids) > 0
    denoiser.train()
    for step in range(steps):
        idx = torch.randint(0, len(y), (cfg.batch_size,), generator=rng)
        xb, yb = x[idx], y[idx]
        draw = draw_noise(schedule, xb, rng)
        l_dm = dm_loss(denoiser, schedule, xb, yb, prototypes, table, cfg.delta, draw=draw)
        l_de = torch.zeros((), dtype=xb.dtype)
        if use_de:
            mask = torch.isin(yb, nb_ids)
            if mask.any():
                sub = type(draw)(draw.k[mask], draw.eps[mask], draw.u[mask])
                l_de = de_loss(denoiser, schedule, xb[mask], yb[mask], neighbors, prototypes,
                               table, draw=sub)
        losses = total_loss(l_dm, l_de, cfg.gamma)
        opt.zero_grad()
        losses.total.backward()
        torch.nn.utils.clip_grad_norm_(clip, cfg.clip_norm)
        opt.step()
        if record is not None:
            record(step, *losses.as_floats())
    denoiser.eval()
    return denoiser, prototypes


@dataclass
class RunArtifacts:
    matrix: AccuracyMatrix
    frechet_trend: list = field(default_factory=list)
    replay: dict = field(default_factory=dict)
    loss_rows: list = field(default_factory=list)
    checksums: dict = field(default_factory=dict)
    classifier: torch.nn.Module | None = None
    denoiser: torch.nn.Module | None = None
    prototypes: object = None
    schedule: object = None
    access_log: object = None


def make_table(cfg: ExperimentConfig, stream: TaskStream) -> EmbeddingTable:
    e = cfg.embeddings
    if e.source == "file":
        table = EmbeddingTable.load(e.path)
    else:
        table = EmbeddingTable.from_hash(range(1, stream.n_classes + 1), e.dim)
    missing = [c for ys in stream.label_sets for c in ys if c not in table]
    if missing:
        raise ConfigError(f"embedding table lacks classes {sorted(set(missing))}")
    return table


def _features(classifier, x, batch=512):
    with torch.no_grad():
        return torch.cat([classifier.features(x[i:i + batch]) for i in range(0, len(x), batch)])


def run_experiment(cfg: ExperimentConfig, stream: TaskStream, table: EmbeddingTable | None = None,
                   writer=None):
    """Run every task of ``stream`` and return the accuracy matrix with run artifacts.

    ``writer``, when given, receives ``task_done(t, artifacts)`` after each task
    so that partial results survive a failing stage.
    """
    table = table or make_table(cfg, stream)
    torch.manual_seed(cfg.seed)
    seed = cfg.seed
    method = cfg.method
    generative = method != "finetuning"
    schedule = build_schedule(cfg.schedule.K, cfg.schedule.beta_start, cfg.schedule.beta_end)
    clip = stream.value_range if cfg.sampler.clip_to_data_range else None
    guidance = GuidanceConfig(cfg.sampler.w, cfg.sampler.inference_steps, cfg.sampler.kind, clip)
    guidance.validate(schedule.K)

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "init", "classifier"))
        classifier = make_classifier(stream.sample_shape, stream.n_classes, cfg.classifier.hidden)
        torch.manual_seed(derive_seed(seed, "init", "denoiser"))
        denoiser = make_denoiser(stream.sample_shape, table.dimension, hidden=cfg.denoiser.hidden,
                                 width=cfg.denoiser.width, time_dim=cfg.denoiser.time_dim,
                                 cross_attention=cfg.denoiser.cross_attention)
    if method == "no_prototype_gr":
        prototypes = ZeroPrototypes(stream.sample_shape)
    else:
        prototypes = PrototypeStore(lr=cfg.prototype.lr, weight_decay=cfg.prototype.weight_decay)

    art = RunArtifacts(AccuracyMatrix(stream.T), schedule=schedule, access_log=stream.log)
    feature_net = None
    real_task1 = None

    for t in range(1, stream.T + 1):
        stream.log.current_task = t
        data = stream.train[t - 1]
        labels = stream.label_sets[t - 1]
        old = stream.classes_before(t)
        memory = None
        stage = "replay"
        try:
            if generative and t >= 2:
                art.checksums[f"theta_at_replay_{t}"] = params_checksum(denoiser)
                memory = generate_replay(old, prototypes, table, denoiser, schedule, guidance,
                                         cfg.sampler.samples_per_class, seed, task=t)
                art.replay[t] = memory

            stage = "classifier"
            train_classifier_task(classifier, data, memory, cfg.classifier,
                                  torch_stream(seed, "classifier", t))

            if generative:
                stage = "prototype_init"
                if method == "cpdm":
                    x, y = data.read("prototype_init")
                    for cid in labels:
                        if cid in prototypes:
                            continue
                        proto = init_prototype(cfg.prototype.init, classifier, x[y == cid], cid,
                                               torch_stream(seed, "prototype", cid),
                                               origin_task=t, sample_shape=stream.sample_shape)
                        prototypes.add(proto)
                art.checksums[f"prototypes_before_{t}"] = prototypes.checksums(max_task=t - 1)

                stage = "diffusion"
                neighbors = build_neighbors(table, labels, old)
                steps = cfg.diffusion.steps_per_task
                if t == 1 and cfg.diffusion.first_task_steps:
                    steps = cfg.diffusion.first_task_steps
                record = lambda s, a, b, c, t=t: art.loss_rows.append((t, s, a, b, c))
                train_diffusion_task(denoiser, prototypes, data, memory, schedule, table, neighbors,
                                     cfg.diffusion, steps, torch_stream(seed, "diffusion", t), record)
                prototypes.freeze_task(t)
                art.checksums[f"prototypes_after_{t}"] = prototypes.checksums(max_task=t - 1)
                art.checksums[f"theta_end_{t}"] = params_checksum(denoiser)

            stage = "evaluate"
            for s in range(1, t + 1):
                xs, ys = stream.test[s - 1]
                art.matrix.set(t, s, accuracy(classifier, xs, ys))
            if t == 1:
                feature_net = copy.deepcopy(classifier).eval()
                real_task1 = _features(feature_net, stream.test[0][0])
            art.frechet_trend.append(
                _frechet_point(cfg, stream, table, denoiser, prototypes, schedule, guidance,
                               feature_net, real_task1, t) if generative else None)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(t, stage, exc) from exc
        finally:
            if writer is not None:
                writer.task_done(t, art, classifier, denoiser, prototypes)

    art.classifier, art.denoiser, art.prototypes = classifier, denoiser, prototypes
    return art.matrix, art


def _frechet_point(cfg, stream, table, denoiser, prototypes, schedule, guidance, feature_net,
                   real_task1, t):
    """Frechet distance between generated and real task-1 test data in task-1 classifier features."""
    gen = generate_replay(stream.label_sets[0], prototypes, table, denoiser, schedule, guidance,
                          cfg.sampler.fid_samples_per_class, cfg.seed, task=t, stream="fid")
    try:
        value, _ = frechet_details(_features(feature_net, gen.x).numpy(), real_task1.numpy())
    except ContractViolation as exc:
        log.warning("Frechet point for task %d skipped: %s", t, exc)
        return None
    return value
