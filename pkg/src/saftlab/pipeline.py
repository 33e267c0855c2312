"""Stage-by-stage experiment pipeline: pretrain, finetune, merge, eval, scan, hessian.

Each stage reads its inputs from files under the output directory and records
what it wrote in ``stages/<name>.json``. The manifest is assembled from those
records, so stages can be run one at a time or resumed.
"""

from __future__ import annotations

import json
import logging
import platform
import time
import traceback
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, diagnostics as dg, io, merge, nn, optim, taskgen
from .config import ExperimentConfig, StageConfig, to_jsonable
from .nn import ModelSpec, TaskDataset

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "merge", "eval", "scan", "hessian")
# Keys that vary between otherwise identical runs.
VOLATILE_KEYS = ("wall_clock_s", "python", "stage_records")
# Missing, corrupt or unreadable inputs, as opposed to a failing computation.
IO_ERRORS = (OSError, io.DigestError, io.FormatError, taskgen.CSVFormatError)


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(master: int, *tags) -> int:
    """Independent 32-bit seed per (master, stage, task) tuple."""
    words = [int(master)] + [zlib.crc32(t.encode()) if isinstance(t, str) else int(t) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class Workspace:
    pretrain_train: TaskDataset
    pretrain_val: TaskDataset
    task_ids: list[str]
    train: list[TaskDataset]
    val: list[TaskDataset]
    test: list[TaskDataset]
    spec: ModelSpec


def build_workspace(cfg: ExperimentConfig) -> Workspace:
    if cfg.suite is not None:
        suite_cfg = cfg.suite
        suite = taskgen.generate_suite(suite_cfg)
        pre_train, pre_val = taskgen.split(suite.pretrain, suite_cfg.val_ratio, derive_seed(cfg.seed, "pre-split"))
        ids = suite.task_ids
        train = [t.train for t in suite.tasks]
        val = [t.val for t in suite.tasks]
        test = [t.test for t in suite.tasks]
        d, c = suite_cfg.input_dim, suite_cfg.num_classes
    else:
        dc = cfg.data
        c = dc.num_classes
        pre = taskgen.load_csv(dc.pretrain, c, "pretrain", "pretrain")
        pre_train, pre_val = taskgen.split(pre, dc.val_ratio, derive_seed(cfg.seed, "pre-split"))
        ids, train, val, test = [], [], [], []
        for t in dc.tasks:
            full = taskgen.load_csv(t.train, c, "train", t.id)
            if t.val is None:
                tr, va = taskgen.split(full, dc.val_ratio, derive_seed(cfg.seed, "split", t.id))
            else:
                tr, va = full, taskgen.load_csv(t.val, c, "val", t.id)
            ids.append(t.id)
            train.append(tr)
            val.append(va)
            test.append(taskgen.load_csv(t.test, c, "test", t.id))
        d = pre.features.shape[1]
        widths = {ds.features.shape[1] for ds in [*train, *val, *test]}
        if widths != {d}:
            raise ValueError("all CSV datasets must share the feature width")
    spec = ModelSpec((d, *cfg.model.hidden_sizes, c), cfg.model.activation)
    return Workspace(pre_train, pre_val, ids, train, val, test, spec)


def resolve_suite_seed(cfg: ExperimentConfig, explicit: bool) -> ExperimentConfig:
    """The suite follows the master seed unless the config pins ``suite.seed``."""
    if cfg.suite is not None and not explicit:
        return replace(cfg, suite=replace(cfg.suite, seed=cfg.seed))
    return cfg


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, threads: int = 0, defaults: list[str] | None = None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output_dir)
        self.threads = threads
        self.defaults = defaults or []
        self._ws: Workspace | None = None

    # ----- helpers
    @property
    def ws(self) -> Workspace:
        if self._ws is None:
            self._ws = build_workspace(self.cfg)
        return self._ws

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def _rel(self, p: Path) -> str:
        return str(Path(p).relative_to(self.out))

    def _record(self, stage: str, files: list[Path], data: dict, started: float) -> dict:
        rec = {
            "stage": stage,
            "wall_clock_s": time.time() - started,
            "files": {self._rel(f): io.file_digest(f) for f in files},
            **data,
        }
        io.write_json(rec, self.path("stages", f"{stage}.json"))
        failed = self.path("stages", f"{stage}.failed")
        if failed.exists():
            failed.unlink()
        return rec

    def _load_record(self, stage: str) -> dict:
        p = self.path("stages", f"{stage}.json")
        if not p.exists():
            raise FileNotFoundError(f"{p}: stage {stage!r} has not been run")
        return json.loads(p.read_text())

    def _map(self, fn, items):
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    @property
    def linearize_at(self):
        return self.load_base()[0] if self.cfg.linearized else None

    def load_base(self):
        params, spec, meta = io.load_checkpoint(self.path("checkpoints", "theta0.json"))
        if spec != self.ws.spec:
            raise ValueError("stored base checkpoint does not match the configured model")
        return params, meta

    def load_finetuned(self) -> list[np.ndarray]:
        return [io.load_checkpoint(self.path("checkpoints", f"{tid}.json"))[0] for tid in self.ws.task_ids]

    def load_task_vectors(self) -> list[merge.TaskVector]:
        return [io.load_task_vector(self.path("task_vectors", f"{tid}.json")) for tid in self.ws.task_ids]

    def load_merged(self, method: str) -> np.ndarray:
        return io.load_checkpoint(self.path("checkpoints", f"merged_{method}.json"))[0]

    # ----- stages
    def pretrain(self) -> dict:
        t0 = time.time()
        ws, st = self.ws, self.cfg.pretrain
        init = nn.init_params(ws.spec, derive_seed(self.cfg.seed, "init"))
        train_cfg = replace(st.train, seed=derive_seed(self.cfg.seed, "pretrain", st.train.seed), linearized=False)
        # Pretraining never uses a sharpness-aware objective.
        res = optim.finetune(init, ws.spec, ws.pretrain_train, ws.pretrain_val, st.optimizer,
                             optim.SharpnessConfig(mode="none"), train_cfg)
        ck = self.path("checkpoints", "theta0.json")
        io.save_checkpoint(res.best_params, ws.spec, {"stage": "pretrain", "seed": train_cfg.seed,
                                                     "best_step": res.best_step}, ck)
        return self._record("pretrain", [ck], {
            "checkpoint_digest": merge.params_digest(res.best_params),
            "val_acc": res.best_val_acc,
            "best_step": res.best_step,
        }, t0)

    def _finetune_one(self, t: int, theta0: np.ndarray):
        ws = self.ws
        tid = ws.task_ids[t]
        st: StageConfig = self.cfg.stage_for(tid)
        train_cfg = replace(st.train, seed=derive_seed(self.cfg.seed, "finetune", t, st.train.seed))
        res = optim.finetune(theta0, ws.spec, ws.train[t], ws.val[t], st.optimizer, st.sharpness, train_cfg)
        return tid, train_cfg, res

    def finetune(self) -> dict:
        t0 = time.time()
        ws = self.ws
        theta0, _ = self.load_base()
        base_digest = merge.params_digest(theta0)
        lin = theta0 if self.cfg.linearized else None
        results = self._map(lambda t: self._finetune_one(t, theta0), range(len(ws.task_ids)))
        files, tasks = [], {}
        for t, (tid, train_cfg, res) in enumerate(results):
            ck = self.path("checkpoints", f"{tid}.json")
            io.save_checkpoint(res.best_params, ws.spec, {"stage": "finetune", "task": tid, "seed": train_cfg.seed,
                                                         "base_digest": base_digest, "best_step": res.best_step}, ck)
            tau = merge.task_vector(res.best_params, theta0, tid)
            tv = self.path("task_vectors", f"{tid}.json")
            io.save_task_vector(tau, tv, {"checkpoint_digest": merge.params_digest(res.best_params)})
            curve = io.write_json({"eval_steps": res.eval_steps, "val_loss": res.loss_curve,
                                   "val_acc": res.val_acc_curve, "config": res.config},
                                  self.path("finetune", f"{tid}_curve.json"))
            files += [ck, tv, curve]
            tasks[tid] = {
                "checkpoint_digest": merge.params_digest(res.best_params),
                "best_step": res.best_step,
                "val_acc": res.best_val_acc,
                "test_acc": nn.accuracy(res.best_params, ws.spec, ws.test[t], lin),
                "task_vector_norm": float(np.linalg.norm(tau.values)),
            }
        return self._record("finetune", files, {"base_digest": base_digest, "tasks": tasks}, t0)

    def merge(self) -> dict:
        t0 = time.time()
        ws, mc = self.ws, self.cfg.merge
        theta0, _ = self.load_base()
        taus = self.load_task_vectors()
        lin = theta0 if self.cfg.linearized else None
        files, methods = [], {}
        for method in mc.methods:
            sr = merge.coefficient_search(theta0, taus, method, ws.val, ws.spec, mc.alpha_grid, mc.prune_grid,
                                          mc.election, lin)
            ck = self.path("checkpoints", f"merged_{method}.json")
            io.save_checkpoint(sr.params, ws.spec, {"stage": "merge", "method": method,
                                                   "config": asdict(sr.config)}, ck)
            table = io.write_json(sr.table, self.path("merge", f"{method}_search.json"))
            files += [ck, table]
            methods[method] = {"config": asdict(sr.config), "checkpoint_digest": merge.params_digest(sr.params),
                               "val_score": max(r["score"] for r in sr.table)}
        return self._record("merge", files, {"methods": methods}, t0)

    def eval(self) -> dict:
        t0 = time.time()
        ws = self.ws
        ft = self._load_record("finetune")["tasks"]
        lin = self.linearize_at
        methods = {}
        for method in self.cfg.merge.methods:
            params = self.load_merged(method)
            per_task = {}
            for t, tid in enumerate(ws.task_ids):
                acc = nn.accuracy(params, ws.spec, ws.test[t], lin)
                entry = {"abs": acc}
                if ft[tid]["test_acc"] > 0:
                    entry["norm"] = acc / ft[tid]["test_acc"]
                per_task[tid] = entry
            norms = [e["norm"] for e in per_task.values() if "norm" in e]
            methods[method] = {
                "per_task": per_task,
                "avg_abs": float(np.mean([e["abs"] for e in per_task.values()])),
                "avg_norm": float(np.mean(norms)) if norms else None,
            }
        out = io.write_json(methods, self.path("eval.json"))
        return self._record("eval", [out], {"methods": methods,
                                            "normalization": "mean of per-task merged/fine-tuned test accuracy"}, t0)

    def _axis(self):
        a = self.cfg.diagnostics.axis
        return np.linspace(a.start, a.stop, a.num)

    def scan(self) -> dict:
        t0 = time.time()
        ws, dc = self.ws, self.cfg.diagnostics
        theta0, _ = self.load_base()
        thetas = self.load_finetuned()
        taus = self.load_task_vectors()
        lin = theta0 if self.cfg.linearized else None
        axis = self._axis()
        files, summary = [], {}
        d = self.path("diagnostics")
        for i, j in dc.pairs:
            key = f"{ws.task_ids[i]}-{ws.task_ids[j]}"
            s = summary.setdefault(key, {})
            others = [t for k, t in enumerate(taus) if k not in (i, j)]
            if dc.xi_pair:
                g = dg.disentanglement_grid_pair(theta0, taus[i], taus[j], ws.test[i], ws.test[j], ws.spec,
                                                 axis, threads=self.threads, linearize_at=lin)
                files += io.emit_grid(g, d / f"xi_pair_{key}.csv")
                s["xi_pair_red_box_mean"] = g.region_mean()
            if dc.xi_all:
                g = dg.disentanglement_grid_all(theta0, taus, (i, j), ws.test[i], ws.test[j], ws.spec,
                                                dc.fixed_alpha, axis, threads=self.threads, linearize_at=lin)
                files += io.emit_grid(g, d / f"xi_all_{key}.csv")
                s["xi_all_red_box_mean"] = g.region_mean()
            if dc.jtl:
                g = dg.jtl_landscape_grid(theta0, taus[i], taus[j], ws.test[i], ws.test[j], ws.spec,
                                          axis1=axis, threads=self.threads, linearize_at=lin)
                files += io.emit_grid(g, d / f"jtl_{key}.csv")
                s["jtl_red_box_mean"] = g.region_mean()
            if dc.jtl_all and others:
                g = dg.jtl_landscape_grid(theta0, taus[i], taus[j], ws.test[i], ws.test[j], ws.spec, others,
                                          dc.fixed_alpha, axis, threads=self.threads, linearize_at=lin)
                files += io.emit_grid(g, d / f"jtl_all_{key}.csv")
                s["jtl_all_red_box_mean"] = g.region_mean()
            if dc.ctl:
                union = TaskDataset.concat([ws.test[i], ws.test[j]], "test", key)
                scores, n_zero = dg.ctl_block_metric(theta0, taus[i], taus[j], union, ws.spec, dc.ctl_lambda)
                p = io.write_json({"lambda": dc.ctl_lambda, "blocks": list(range(ws.spec.n_blocks)),
                                   "scores": scores.tolist(), "zero_norm_rows": n_zero}, d / f"ctl_{key}.json")
                files.append(p)
                s["ctl"] = scores.tolist()
            if dc.jtl_gap:
                obj_i, obj_j = dg.mlp_objectives(ws.spec, ws.test[i], ws.test[j], lin)
                c = dg.jtl_gap_curve(thetas[i], thetas[j], obj_i, obj_j, dc.barrier_points)
                c.context.update(tasks=[ws.task_ids[i], ws.task_ids[j]])
                files += io.emit_curve(c, d / f"jtl_gap_{key}.csv")
                s["jtl_gap_max_abs"] = float(np.abs(c.values).max())
        if dc.barrier:
            merged = self.load_merged(dc.merge_method) if dc.merge_method in self.cfg.merge.methods else None
            if merged is not None:
                for t, tid in enumerate(ws.task_ids):
                    c = dg.loss_barrier_path(merged, thetas[t], ws.test[t], ws.spec, dc.barrier_points, lin)
                    c.context.update(task=tid, merge_method=dc.merge_method)
                    files += io.emit_curve(c, d / f"barrier_{tid}.csv")
                    summary.setdefault("barrier", {})[tid] = float(c.values.max() - max(c.values[0], c.values[-1]))
        return self._record("scan", files, {"summary": summary}, t0)

    def hessian(self) -> dict:
        t0 = time.time()
        ws, dc = self.ws, self.cfg.diagnostics
        theta0, _ = self.load_base()
        thetas = self.load_finetuned()
        lin = theta0 if self.cfg.linearized else None
        pw = {"max_iters": dc.power.max_iters, "tol": dc.power.tol, "shift": dc.power.shift}
        files, out = [], {"eigen_minima": {}, "jtl_bound": {}}
        d = self.path("diagnostics")
        objs = [nn.DatasetObjective(ws.spec, ws.test[t], lin) for t in range(len(ws.task_ids))]
        if dc.eigen_minima:
            def eig(t):
                return dg.dominant_eigenvalue(thetas[t], objs[t], seed=derive_seed(self.cfg.seed, "eig", t), **pw)
            for tid, r in zip(ws.task_ids, self._map(eig, range(len(ws.task_ids)))):
                out["eigen_minima"][tid] = {"lambda_max": r.value, "iterations": r.iterations,
                                            "converged": r.converged}
            out["mean_lambda_max"] = float(np.mean([v["lambda_max"] for v in out["eigen_minima"].values()]))
        if dc.eigen_segment:
            for t, tid in enumerate(ws.task_ids):
                c = dg.eigenvalue_along_segment(theta0, thetas[t], objs[t], dc.segment_points,
                                                seed=derive_seed(self.cfg.seed, "segment", t),
                                                threads=self.threads, **pw)
                c.context.update(task=tid)
                files += io.emit_curve(c, d / f"eigen_segment_{tid}.csv")
        if dc.jtl_bound:
            for i, j in dc.pairs:
                key = f"{ws.task_ids[i]}-{ws.task_ids[j]}"
                b = dg.jtl_bound_check(thetas[i], thetas[j], dc.bound_alpha, objs[i], objs[j],
                                       seed=derive_seed(self.cfg.seed, "bound", i, j), **pw)
                out["jtl_bound"][key] = asdict(b) | {"alpha": dc.bound_alpha}
        p = io.write_json(out, d / "hessian.json")
        files.append(p)
        return self._record("hessian", files, out, t0)

    # ----- orchestration
    def run_stage(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        log.info("stage %s", stage)
        try:
            return getattr(self, stage)()
        except Exception as exc:
            self.path("stages").mkdir(parents=True, exist_ok=True)
            self.path("stages", f"{stage}.failed").write_text(
                "".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
            if isinstance(exc, IO_ERRORS):
                raise
            raise StageFailure(stage, exc) from exc

    def run(self, stages=STAGES, start: str | None = None) -> dict:
        stages = list(stages)
        if start is not None:
            if start not in stages:
                raise ValueError(f"unknown stage {start!r}")
            stages = stages[stages.index(start):]
        for s in stages:
            self.run_stage(s)
        return self.write_manifest()

    def write_manifest(self) -> dict:
        records = {}
        for s in STAGES:
            p = self.path("stages", f"{s}.json")
            if p.exists():
                records[s] = self._load_record(s)
        files, stage_files = {}, {}
        for s, r in records.items():
            files.update(r["files"])
            rec = self.path("stages", f"{s}.json")
            stage_files[self._rel(rec)] = io.file_digest(rec)
        manifest = {
            "tool": "saftlab",
            "tool_version": __version__,
            "python": platform.python_version(),
            "config": to_jsonable(self.cfg),
            "defaults_applied": self.defaults,
            "seed": self.cfg.seed,
            "stages": records,
            "files": files,
            # Stage records embed wall-clock times, so their digests vary between reruns.
            "stage_records": stage_files,
        }
        if "finetune" in records:
            manifest["finetuned_accuracy"] = {k: {"val": v["val_acc"], "test": v["test_acc"]}
                                            for k, v in records["finetune"]["tasks"].items()}
        if "eval" in records:
            manifest["merged_accuracy"] = records["eval"]["methods"]
        diag = [f for f in files if f.startswith("diagnostics/")]
        if diag:
            manifest["diagnostic_artifacts"] = sorted(diag)
        io.write_json(manifest, self.path("manifest.json"))
        return manifest


def strip_volatile(obj):
    """Copy of a manifest with wall-clock and host fields removed."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def run_pipeline(cfg: ExperimentConfig, out_dir=None, threads: int = 0, defaults=None) -> dict:
    return Pipeline(cfg, out_dir, threads, defaults).run()
