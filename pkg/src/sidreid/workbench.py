"""Training loop, checkpoints, feature extraction and evaluation."""

from __future__ import annotations

import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import RunConfig, learning_rate
from .data import DatasetSplit, apply_augmentation, load_dataset, sample_batch
from .metrics import EvalReport, mean_attribute_accuracy, reid_relevance, retrieval_metrics
from .model import PersonEmbedder, to_tensor_images
from .retrieval import AttributeQuery, GalleryIndex, aps_scores, par_labels, par_predict, reid_scores
from .schema import GROUPS, AttributeSchema, builtin_schema, load_schema
from .synthetic import generate_synthetic

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def resolve_schema(ref) -> AttributeSchema:
    if isinstance(ref, AttributeSchema):
        return ref
    if isinstance(ref, dict):
        return load_schema(ref)
    p = Path(str(ref))
    return load_schema(p) if p.suffix in (".yaml", ".yml", ".json") else builtin_schema(str(ref))


def build_splits(cfg: RunConfig, schema: AttributeSchema) -> dict[str, DatasetSplit]:
    if cfg.data.synthetic is not None:
        return generate_synthetic(cfg.data.synthetic, schema, cfg.data.seed)
    return load_dataset(cfg.data.root, schema, cfg.data.annotations, tuple(cfg.model.image_size),
                        cfg.data.expected_train_ids)


class Trainer:
    """Owns the model, optimiser, sampler RNG and the loss history of one run."""

    def __init__(self, cfg: RunConfig, splits: dict[str, DatasetSplit] | None = None, schema=None):
        self.cfg = cfg
        self.schema = resolve_schema(schema if schema is not None else cfg.schema)
        self.splits = splits if splits is not None else build_splits(cfg, self.schema)
        self.train_split = self.splits["train"]
        if self.train_split.schema.hash != self.schema.hash:
            raise CheckpointError("dataset and run use different attribute schemas")
        self.train_ids = sorted({r.person_id for r in self.train_split.records})
        id_map = {p: i for i, p in enumerate(self.train_ids)}
        self.train_labels = torch.tensor([id_map[p] for p in self.train_split.person_ids])
        self.train_sids = torch.from_numpy(self.train_split.sid_matrix())

        counts = self.train_split.sid_counts()
        margins = L.group_margins(counts, self.train_split.num_persons, cfg.loss)
        self.margins = {g: torch.as_tensor(m, dtype=torch.float32) for g, m in margins.items()}

        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        torch.manual_seed(int(seeds[0].generate_state(1)[0]))
        self.model = PersonEmbedder(self.schema, cfg.model, len(self.train_ids))
        self.rng = np.random.default_rng(seeds[1])
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.optim.warmup_start_lr,
                                          betas=tuple(cfg.optim.betas), weight_decay=cfg.optim.weight_decay)
        self.iteration = 0
        self.history: list[dict] = []

    # -- training ---------------------------------------------------------

    def compute_losses(self, images: torch.Tensor, labels: torch.Tensor, sids: torch.Tensor) -> L.LossReport:
        model = self.model
        reps = model(images)
        bank = model.bank
        protos = [bank.prototypes[g] for g in GROUPS]
        sem_terms = L.semantic_guidance_loss(reps.post, protos, sids, [self.margins[g] for g in GROUPS], reduce=False)
        ce_terms, tri_terms = L.identification_loss(reps.post, model.logits(reps), labels, reduce=False)
        if self.cfg.triplet_features == "pre":
            tri_terms = torch.stack([L.batch_hard_triplet(reps.pre[:, j], labels) for j in range(len(GROUPS))], 1)
        reg_terms = L.regularization_loss(protos, [bank.bases[g] for g in GROUPS],
                                          [bank.attributes(g) for g in GROUPS], reduce=False)
        per_group = {
            "sem": dict(zip(GROUPS, sem_terms.mean(0).detach())),
            "id_ce": dict(zip(GROUPS, ce_terms.mean(0).detach())),
            "id_triplet": dict(zip(GROUPS, tri_terms.mean(0).detach())),
            "reg": dict(zip(GROUPS, reg_terms.detach())),
        }
        return L.total_loss(sem_terms.mean(), ce_terms.mean(), tri_terms.mean(), reg_terms.mean(),
                            self.cfg.loss, per_group)

    def next_batch(self):
        batch = sample_batch(self.train_split, self.cfg.sampler, self.rng, self.cfg.augment)
        images = apply_augmentation(self.train_split.load_images(batch.indices), batch)
        idx = torch.from_numpy(batch.indices)
        return to_tensor_images(images), self.train_labels[idx], self.train_sids[idx]

    def step(self) -> dict:
        lr = learning_rate(self.iteration, self.cfg.optim)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        images, labels, sids = self.next_batch()
        report = self.compute_losses(images, labels, sids)
        if not torch.isfinite(report.total):
            path = self._dump_diagnostics(report)
            raise TrainingError(f"non-finite loss at iteration {self.iteration}; snapshot written to {path}")
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        row = {"iteration": self.iteration, "lr": lr, **report.as_floats()}
        self.history.append(row)
        self.iteration += 1
        return row

    def run(self, iterations: int | None = None, callback=None) -> list[dict]:
        end = self.cfg.optim.iterations if iterations is None else self.iteration + iterations
        out_dir = Path(self.cfg.output_dir) if self.cfg.output_dir else None
        while self.iteration < end:
            row = self.step()
            if self.cfg.log_every and row["iteration"] % self.cfg.log_every == 0:
                log.info("it %(iteration)d lr %(lr).2e total %(total).4f sem %(sem).4f "
                         "ce %(id_ce).4f tri %(id_triplet).4f reg %(reg).4f", row)
                if out_dir:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    with open(out_dir / "metrics.jsonl", "a") as fh:
                        fh.write(json.dumps(row) + "\n")
            if out_dir and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                self.save(out_dir / f"checkpoint_{self.iteration:06d}.pt")
            if callback is not None:
                callback(self, row)
        return self.history

    def _dump_diagnostics(self, report) -> Path:
        out = Path(self.cfg.output_dir or ".") / f"nonfinite_{self.iteration:06d}.pt"
        out.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"losses": {k: float(v) for k, v in report.as_floats().items()},
                    "model": self.model.state_dict(), "iteration": self.iteration}, out)
        return out

    # -- checkpoints ------------------------------------------------------

    def state(self) -> dict:
        return _canonical({
            "format": 1,
            "config": self.cfg.to_dict(),
            "schema": self.schema.to_document(),
            "schema_hash": self.schema.hash,
            "iteration": self.iteration,
            "train_ids": list(self.train_ids),
            "margins": {g: m.tolist() for g, m in self.margins.items()},
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "history": list(self.history),
        })

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.state(), buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path, splits=None, schema=None) -> "Trainer":
        state = read_checkpoint(path, schema)
        cfg = RunConfig.from_dict(state["config"])
        trainer = cls(cfg, splits, load_schema(state["schema"]))
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.rng.bit_generator.state = state["rng"]
        torch.set_rng_state(state["torch_rng"])
        trainer.iteration = state["iteration"]
        trainer.history = list(state["history"])
        trainer.margins = {g: torch.tensor(m, dtype=torch.float32) for g, m in state["margins"].items()}
        return trainer


def _canonical(obj):
    """Rebuild containers with interned strings so that pickling does not depend on object identity."""
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        out = type(obj)((_canonical(k), _canonical(v)) for k, v in obj.items())
        meta = getattr(obj, "_metadata", None)
        if meta is not None:
            out._metadata = _canonical(meta)
        return out
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def read_checkpoint(path, schema: AttributeSchema | None = None) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if schema is not None and schema.hash != state["schema_hash"]:
        raise CheckpointError(f"checkpoint schema hash {state['schema_hash']} does not match {schema.hash}")
    if load_schema(state["schema"]).hash != state["schema_hash"]:
        raise CheckpointError("checkpoint schema document does not match its stored hash")
    return state


def load_model(path, schema: AttributeSchema | None = None) -> tuple[PersonEmbedder, RunConfig, AttributeSchema]:
    """Model snapshot for inference only (no dataset needed)."""
    state = read_checkpoint(path, schema)
    cfg = RunConfig.from_dict(state["config"])
    schema = load_schema(state["schema"])
    model = PersonEmbedder(schema, cfg.model, len(state["train_ids"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg, schema


# -- inference --------------------------------------------------------------

@torch.no_grad()
def extract(model: PersonEmbedder, split: DatasetSplit, batch_size: int = 128, with_heat=False):
    """Normalised-feature array (N, 5, d); with ``with_heat`` also the alignment heat maps and row bounds."""
    model.eval()
    feats, heat, bounds = [], [], []
    for s in range(0, len(split), batch_size):
        x = to_tensor_images(split.load_images(range(s, min(s + batch_size, len(split)))))
        reps = model(x)
        feats.append(reps.post.double().numpy())
        if with_heat:
            if reps.alignment is None:
                _, F_l = model.feature_maps(x)
                hm = F_l.norm(dim=1)
                heat.append(hm.numpy())
                bounds.append(np.stack([np.zeros(len(x)), np.full(len(x), hm.shape[1] - 1)], 1))
            else:
                heat.append(reps.alignment.heat_map.numpy())
                bounds.append(torch.stack([reps.alignment.top, reps.alignment.bottom], 1).numpy())
    feats = np.concatenate(feats)
    if with_heat:
        return feats, np.concatenate(heat), np.concatenate(bounds).astype(np.int64)
    return feats


def gallery_index(model, split: DatasetSplit, batch_size=128) -> GalleryIndex:
    return GalleryIndex(extract(model, split, batch_size), split.person_ids, split.camera_ids,
                        split.sid_matrix(), [str(r.image_ref) for r in split.records])


def evaluate_reid(query_feats: np.ndarray, query_pids, query_cams, gallery: GalleryIndex,
                  protocol_filter: bool = True, max_rank: int = 20):
    """Image-to-image retrieval metrics. Takes representations only, never prototypes."""
    scores = reid_scores(query_feats, gallery.feats)
    relevant, keep = reid_relevance(query_pids, gallery.person_ids, query_cams, gallery.camera_ids, protocol_filter)
    return retrieval_metrics(scores, relevant, keep, max_rank)


def aps_queries(sid_rows: np.ndarray, groups=GROUPS) -> list[AttributeQuery]:
    """One query per distinct SID combination (restricted to ``groups``)."""
    cols = [GROUPS.index(g) for g in groups]
    uniq = np.unique(np.asarray(sid_rows)[:, cols], axis=0)
    return [AttributeQuery({g: (int(k),) for g, k in zip(groups, row)}) for row in uniq]


def evaluate_aps(queries: list[AttributeQuery], prototypes, gallery: GalleryIndex, max_rank: int = 20):
    """Relevant items share the queried SID of every present group."""
    if not queries:
        raise ValueError("no APS queries")
    scores = np.stack([aps_scores(q, prototypes, gallery.feats) for q in queries])
    relevant = np.ones_like(scores, dtype=bool)
    for i, q in enumerate(queries):
        for g in q.present_groups:
            relevant[i] &= np.isin(gallery.sids[:, GROUPS.index(g)], q.candidates[g])
    return retrieval_metrics(scores, relevant, None, max_rank)


def evaluate_par(feats: np.ndarray, prototypes, split: DatasetSplit, schema: AttributeSchema, balanced=False):
    preds = par_labels(par_predict(feats, prototypes), schema)
    truth = par_labels(split.sid_matrix(), schema)
    return mean_attribute_accuracy(preds, truth, schema.attribute_names, balanced)


def evaluate(model: PersonEmbedder, splits: dict[str, DatasetSplit], schema: AttributeSchema,
             protocol_filter: bool = True, aps: bool = True, par: bool = True, batch_size: int = 128,
             max_rank: int = 20) -> EvalReport:
    query, gallery_split = splits.get("query"), splits.get("gallery")
    if query is None or len(query) == 0:
        raise ValueError("evaluation needs a non-empty query split")
    if gallery_split is None or len(gallery_split) == 0:
        raise ValueError("evaluation needs a non-empty gallery split")
    q_feats = extract(model, query, batch_size)
    gallery = gallery_index(model, gallery_split, batch_size)
    mAP, curve, n = evaluate_reid(q_feats, query.person_ids, query.camera_ids, gallery, protocol_filter, max_rank)
    report = EvalReport(mAP=mAP, cmc=curve.tolist(), num_queries=n)
    protos = model.bank.snapshot()
    if aps:
        a_map, a_cmc, _ = evaluate_aps(aps_queries(query.sid_matrix()), protos, gallery, max_rank)
        report.aps_mAP, report.aps_cmc = a_map, a_cmc.tolist()
    if par:
        report.mA, report.per_attribute = evaluate_par(gallery.feats, protos, gallery_split, schema)
    return report


@torch.no_grad()
def recognize(model: PersonEmbedder, images: np.ndarray, schema: AttributeSchema) -> list[dict[str, str]]:
    """Attribute labels for (B, H, W, 3) float images."""
    model.eval()
    reps = model(to_tensor_images(images))
    return par_labels(par_predict(reps.post.double().numpy(), model.bank.snapshot()), schema)


@torch.no_grad()
def residual_gap(model: PersonEmbedder, group: str, sid: int, anchors) -> float:
    """Mean distance between prototype ``sid`` and its position predicted from each anchor SID.

    The prediction from anchor n is p_n + (A_sid - A_n) V, i.e. the residual path
    through the attribute basis of ``group``.
    """
    bank = model.bank
    protos = bank.prototypes[group].double()
    basis = bank.residual_basis(group).double()
    attrs = bank.attributes(group).double()
    anchors = [int(n) for n in anchors if int(n) != sid]
    if not anchors:
        raise ValueError("need at least one anchor SID other than the target")
    gaps = [(protos[sid] - protos[n] - L.residual_vector(attrs[sid], attrs[n], basis)).norm() for n in anchors]
    return float(torch.stack(gaps).mean())


def sid_queries(split: DatasetSplit, group: str, sid: int) -> list[AttributeQuery]:
    """Full five-group queries for every distinct combination in ``split`` that carries ``sid`` in ``group``."""
    rows = split.sid_matrix()
    rows = rows[rows[:, GROUPS.index(group)] == sid]
    return aps_queries(rows) if len(rows) else []
