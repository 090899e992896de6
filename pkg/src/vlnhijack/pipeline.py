"""Pipeline stages. Each stage reads its inputs from, and writes its outputs to, one run directory.

Layout::

    worlds/manifest.json, worlds/<env>.json, worlds/<env>.txa
    agent/params.json, agent/params.bin, agent/metrics.json
    attacks/instances.json, attacks/rejections.json
    attacks/<instance>/atlas.txa, attacks/<instance>/checkpoints.json
    eval/reports.json, eval/summary.json, eval/factors.csv
    ablate/ablation.json, ablate/ablation.csv
    report/report.md, report/instances.csv
"""
from __future__ import annotations

import csv
import io
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import agent as ag
from . import storage
from .attack import AttackInstance, Rejection, build_attack_instance, candidate_objects, optimize_attack
from .config import RunConfig, config_hash, serialize_config
from .environment import World
from .evaluation import MetricsReport, evaluate_instance, export_factors, sign_test
from .metrics import ndtw, success
from .worldgen import generate_episodes, generate_world, stable_hash

logger = logging.getLogger(__name__)

COMMANDS = ("gen-world", "train-agent", "build-attacks", "attack", "eval", "ablate", "report")
SPLITS = ("train", "val", "test")
CONDITIONS = ("attacked", "unattacked")


def safe_name(instance_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", instance_id)


def paraphrase_index(episode_id: str) -> int:
    return int(episode_id.rsplit("-", 1)[1])


def split_heldout(episodes, fraction: float):
    """Hold out the last ``fraction`` of trajectories (in generation order), never sharing a path with train."""
    order = list(dict.fromkeys(e.trajectory for e in episodes))
    n_held = max(1, int(math.ceil(fraction * len(order))))
    held = set(order[-n_held:])
    train = [e for e in episodes if e.trajectory not in held]
    heldout = [e for e in episodes if e.trajectory in held]
    return train, heldout


def _instance_seed(base: int, instance_id: str) -> int:
    return (base * 1_000_003 + stable_hash(instance_id)) % (2 ** 31)


# --------------------------------------------------------------------------- worker-side helpers

_WORKER_CACHE: dict = {}


def _cached_world(path: str, resolution: int) -> World:
    key = (path, resolution)
    if key not in _WORKER_CACHE:
        scene, graph, _ = storage.load_world(path)
        _WORKER_CACHE[key] = World(scene, graph, resolution)
    return _WORKER_CACHE[key]


def _cached_params(path: str) -> ag.PolicyParams:
    if path not in _WORKER_CACHE:
        _WORKER_CACHE[path] = storage.load_params(path)
    return _WORKER_CACHE[path]


def _attack_job(job: dict) -> tuple[str, list]:
    import torch

    torch.set_num_threads(1)
    world = _cached_world(job["world"], job["resolution"])
    params = _cached_params(job["params"])
    inst = storage.instance_from_dict(job["instance"])
    texels, log = optimize_attack(inst, world, params, job["config"])
    texels = storage.quantize_within_budget(texels, world.scene.atlas.texels, job["config"].epsilon)
    out = Path(job["out"])
    storage.save_texture(out / "atlas.txa", texels)
    storage.write_json(out / "checkpoints.json", {
        "config_hash": job["hash"], "instance_id": inst.instance_id,
        "checkpoints": [{"iteration": c.iteration, "score": c.score} for c in log],
        "selected": max(log, key=lambda c: (c.score, -c.iteration)).iteration,
    })
    return inst.instance_id, [(c.iteration, c.score) for c in log]


def _ablation_job(job: dict) -> float:
    import torch

    torch.set_num_threads(1)
    world = _cached_world(job["world"], job["resolution"])
    params = _cached_params(job["params"])
    inst = storage.instance_from_dict(job["instance"])
    texels, _ = optimize_attack(inst, world, params, job["config"])
    attacked = world.with_texels(texels, inst.attack_object)
    rep = evaluate_instance(params, attacked, inst, inst.train_split, "attack")
    return rep.ndtw / 100.0, rep.sr


# --------------------------------------------------------------------------- pipeline


class Pipeline:
    def __init__(self, cfg: RunConfig, out, workers: int = 1):
        self.cfg = cfg
        self.out = Path(out)
        self.workers = max(1, int(workers))
        self.hash = config_hash(cfg)

    # paths
    def p(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def run(self, command: str) -> None:
        if command not in COMMANDS:
            raise ValueError(f"unknown command {command!r}")
        getattr(self, command.replace("-", "_"))()

    def _map(self, fn, jobs):
        if self.workers == 1 or len(jobs) <= 1:
            return [fn(j) for j in jobs]
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, jobs))

    # ---------------------------------------------------------------- loaders

    def _manifest(self) -> dict:
        path = storage.require(self.p("worlds", "manifest.json"), "world manifest (run gen-world first)")
        doc = storage.read_json(path)
        storage.check_hash(doc, self.hash, path)
        return doc

    def load_worlds(self):
        """env_id -> (World, train episodes, held-out episodes)."""
        manifest = self._manifest()
        worlds = {}
        for env_id in manifest["env_ids"]:
            path = storage.require(self.p("worlds", f"{env_id}.json"), f"world {env_id}")
            scene, graph, episodes = storage.load_world(path)
            split = storage.read_json(path)["split"]
            w = World(scene, graph, self.cfg.world.resolution)
            worlds[env_id] = (w, [e for e in episodes if split[e.episode_id] == "train"],
                              [e for e in episodes if split[e.episode_id] == "heldout"])
        return worlds

    def load_params(self) -> ag.PolicyParams:
        path = storage.require(self.p("agent", "params.json"), "trained params (run train-agent first)")
        storage.check_hash(storage.read_json(path), self.hash, path)
        return storage.load_params(path)

    def load_instances(self) -> list[AttackInstance]:
        path = storage.require(self.p("attacks", "instances.json"), "attack instances (run build-attacks first)")
        doc = storage.read_json(path)
        storage.check_hash(doc, self.hash, path)
        return [storage.instance_from_dict(d) for d in doc["instances"]]

    def load_attacked_texels(self, inst: AttackInstance) -> np.ndarray:
        path = self.p("attacks", safe_name(inst.instance_id), "atlas.txa")
        if not path.exists():
            raise storage.ArtifactError(f"no attacked atlas found for {inst.instance_id}: {path}")
        log = storage.read_json(storage.require(path.with_name("checkpoints.json"), "checkpoint log"))
        storage.check_hash(log, self.hash, path.with_name("checkpoints.json"))
        return storage.load_texture(path)

    # ---------------------------------------------------------------- stages

    def gen_world(self) -> None:
        wc = self.cfg.world
        env_ids = []
        for k in range(wc.n_worlds):
            seed = self.cfg.run.seed * 1000 + k
            scene, graph = generate_world(seed, wc.params())
            episodes = generate_episodes(graph, scene, wc.episodes_per_world, seed=10_000 + seed)
            train, held = split_heldout(episodes, wc.heldout_fraction)
            split = {e.episode_id: "train" for e in train} | {e.episode_id: "heldout" for e in held}
            storage.save_world(self.p("worlds"), scene, graph, episodes,
                               {"config_hash": self.hash, "seed": seed, "split": split})
            env_ids.append(scene.env_id)
            logger.info("world %s: %d nodes, %d objects, %d train / %d held-out episodes",
                        scene.env_id, graph.num_nodes, len(scene.objects), len(train), len(held))
        storage.write_json(self.p("worlds", "manifest.json"), {
            "config_hash": self.hash, "env_ids": env_ids, "config": serialize_config(self.cfg)})

    def train_agent(self) -> None:
        worlds = self.load_worlds()
        ac = self.cfg.agent
        train = [e for _, tr, _ in worlds.values() for e in tr]
        held = [e for _, _, he in worlds.values() for e in he]
        history: list = []
        init = ag.PolicyParams.initialize(dim=ac.dim, seed=ac.seed + self.cfg.run.seed)
        params = ag.train_bc(init, train, {k: v[0] for k, v in worlds.items()}, epochs=ac.epochs, lr=ac.lr,
                             batch_size=ac.batch_size, seed=ac.seed + self.cfg.run.seed, loss_history=history,
                             label_smoothing=ac.label_smoothing)
        gate = competence(params, {k: v[0] for k, v in worlds.items()}, held)
        gate.update(loss_history=history, config_hash=self.hash)
        storage.save_params(self.p("agent", "params"), params,
                            {"config_hash": self.hash, "fingerprint": params.fingerprint()})
        storage.write_json(self.p("agent", "metrics.json"), gate)
        logger.info("agent gate: SR %.1f%%, nDTW %.3f on %d held-out episodes (%s)",
                    gate["sr"], gate["ndtw"], gate["n"], "pass" if gate["passed"] else "FAIL")

    def build_attacks(self) -> None:
        worlds = self.load_worlds()
        gate = storage.read_json(storage.require(self.p("agent", "metrics.json"), "agent metrics"))
        if not gate["passed"]:
            logger.warning("agent did not pass the competence gate; attack results are not meaningful")
        train = [e for _, tr, _ in worlds.values() for e in tr]
        held = sorted((e for _, _, he in worlds.values() for e in he),
                      key=lambda e: (stable_hash(e.episode_id), e.episode_id))
        cands = {k: candidate_objects(w) for k, (w, _, _) in worlds.items()}
        instances, rejections = [], []
        for mode in self.cfg.attack.modes:
            accepted = 0
            for ep in held:
                if accepted >= self.cfg.attack.max_instances:
                    break
                res = build_attack_instance(ep, train, worlds[ep.env_id][0], mode, cands[ep.env_id])
                if isinstance(res, Rejection):
                    rejections.append({"mode": mode, "episode_id": res.episode_id, "reason": res.reason})
                else:
                    instances.append(res)
                    accepted += 1
            logger.info("%s: %d instances accepted", mode, accepted)
        storage.write_json(self.p("attacks", "instances.json"), {
            "config_hash": self.hash, "instances": [storage.instance_to_dict(i) for i in instances]})
        storage.write_json(self.p("attacks", "rejections.json"), {"config_hash": self.hash,
                                                                    "rejections": rejections})

    def _jobs(self, instances, configs, out_dirs=None):
        params_path = str(self.p("agent", "params.json"))
        jobs = []
        for k, (inst, cfg) in enumerate(zip(instances, configs)):
            jobs.append({"world": str(self.p("worlds", f"{inst.env_id}.json")), "resolution": self.cfg.world.resolution,
                         "params": params_path, "instance": storage.instance_to_dict(inst), "config": cfg,
                         "hash": self.hash, "out": str(out_dirs[k]) if out_dirs else ""})
        return jobs

    def attack(self) -> None:
        self.load_params()
        instances = self.load_instances()
        todo, configs, dirs = [], [], []
        for inst in instances:
            d = self.p("attacks", safe_name(inst.instance_id))
            log = d / "checkpoints.json"
            if (d / "atlas.txa").exists() and log.exists() and storage.read_json(log).get("config_hash") == self.hash:
                continue  # already done for this config
            todo.append(inst)
            configs.append(self.cfg.attack.attack_config(inst.mode, _instance_seed(self.cfg.run.seed, inst.instance_id)))
            dirs.append(d)
        for iid, log in self._map(_attack_job, self._jobs(todo, configs, dirs)):
            logger.info("attacked %s: best val score %.3f", iid, max(s for _, s in log))

    def eval(self) -> None:
        params = self.load_params()
        instances = self.load_instances()
        attacked_tex = {inst.instance_id: self.load_attacked_texels(inst) for inst in instances}
        worlds = self.load_worlds()
        reports = []
        for inst in instances:
            base = worlds[inst.env_id][0]
            views = {"unattacked": base, "attacked": base.with_texels(attacked_tex[inst.instance_id], inst.attack_object)}
            sets = {"train": inst.train_split, "val": inst.val_split, "test": (inst.test_episode,)}
            for cond, world in views.items():
                for ref in ("attack", "original"):
                    for split, eps in sets.items():
                        rep = evaluate_instance(params, world, inst, eps, ref)
                        reports.append({"mode": inst.mode, "condition": cond, "split": split, **rep.to_dict()})
        storage.write_json(self.p("eval", "reports.json"), {"config_hash": self.hash, "reports": reports})
        summary = summarize(reports)
        summary["config_hash"] = self.hash
        storage.write_json(self.p("eval", "summary.json"), summary)
        traj = [i for i in instances if i.mode == "trajectory"]
        if traj:
            pick = {(r["instance_id"], r["condition"]): MetricsReport.from_dict(r) for r in reports
                    if r["split"] == "train" and r["reference"] == "attack"}
            export_factors(traj, [pick[(i.instance_id, "unattacked")] for i in traj],
                           [pick[(i.instance_id, "attacked")] for i in traj], self.p("eval", "factors.csv"),
                           {k: v[0] for k, v in worlds.items()}, self.cfg.attack.steps_rendered)

    def ablate(self) -> None:
        self.load_params()
        instances = [i for i in self.load_instances() if i.mode == "trajectory"][: self.cfg.ablation.instances]
        if not instances:
            raise storage.ArtifactError("no trajectory attack instances to ablate")
        rows = run_ablation(self, instances)
        storage.write_json(self.p("ablate", "ablation.json"), {"config_hash": self.hash, "rows": rows})
        buf = io.StringIO(newline="")
        w = csv.writer(buf)
        w.writerow(["variable", "value", "train_ndtw", "train_sr"])
        for r in rows:
            w.writerow([r["variable"], r["value"], repr(r["train_ndtw"]), repr(r["train_sr"])])
        storage.atomic_write_bytes(self.p("ablate", "ablation.csv"), buf.getvalue().encode("utf-8"))

    def report(self) -> None:
        path = storage.require(self.p("eval", "summary.json"), "evaluation summary (run eval first)")
        summary = storage.read_json(path)
        storage.check_hash(summary, self.hash, path)
        ablation = None
        if self.p("ablate", "ablation.json").exists():
            ablation = storage.read_json(self.p("ablate", "ablation.json"))["rows"]
        text = render_report(summary, ablation)
        storage.atomic_write_bytes(self.p("report", "report.md"), text.encode("utf-8"))
        reports = storage.read_json(self.p("eval", "reports.json"))["reports"]
        lines = ["instance_id,mode,split,reference,condition,sr,osr,ndtw,stop_rate"]
        for r in reports:
            a = r["aggregates"]
            lines.append(",".join([r["instance_id"], r["mode"], r["split"], r["reference"], r["condition"],
                                   *(repr(a[k]) for k in ("sr", "osr", "ndtw", "stop_rate"))]))
        storage.atomic_write_bytes(self.p("report", "instances.csv"), ("\n".join(lines) + "\n").encode("utf-8"))
        print(text)


# --------------------------------------------------------------------------- stage helpers


def competence(params: ag.PolicyParams, worlds: dict, episodes) -> dict:
    """Free-rollout SR (%) and mean nDTW on ``episodes``; the gate is SR >= 80 and nDTW >= 0.75."""
    sr, nd = [], []
    for e in episodes:
        w = worlds[e.env_id]
        path = ag.rollout(params, w, e.instruction, e.trajectory[0])
        sr.append(success(path, e.trajectory, w.graph.positions))
        nd.append(ndtw(path, e.trajectory, w.graph.positions))
    out = {"n": len(episodes), "sr": 100.0 * float(np.mean(sr)), "ndtw": float(np.mean(nd))}
    out["passed"] = bool(out["n"] >= 100 and out["sr"] >= 80.0 and out["ndtw"] >= 0.75)
    return out


def summarize(reports) -> dict:
    """Instance-mean aggregates per (mode, split, reference, condition) plus paired sign tests."""
    groups: dict = {}
    for r in reports:
        key = (r["mode"], r["split"], r["reference"], r["condition"])
        groups.setdefault(key, []).append(r)
    table = []
    for (mode, split, ref, cond), rows in sorted(groups.items()):
        agg = {k: float(np.mean([r["aggregates"][k] for r in rows])) for k in ("sr", "osr", "ndtw", "stop_rate")}
        table.append({"mode": mode, "split": split, "reference": ref, "condition": cond,
                      "instances": len(rows), **agg})
    tests = []
    for mode in sorted({r["mode"] for r in reports}):
        for split in SPLITS:
            pre = {r["instance_id"]: r["aggregates"] for r in reports if (r["mode"], r["split"], r["reference"],
                                                                         r["condition"]) == (mode, split, "attack", "unattacked")}
            post = {r["instance_id"]: r["aggregates"] for r in reports if (r["mode"], r["split"], r["reference"],
                                                                          r["condition"]) == (mode, split, "attack", "attacked")}
            ids = sorted(pre)
            if not ids:
                continue
            metric = "stop_rate" if mode == "stop" else "ndtw"
            p = sign_test([pre[i][metric] for i in ids], [post[i][metric] for i in ids])
            tests.append({"mode": mode, "split": split, "metric": metric, "instances": len(ids), "p_value": p})
    return {"table": table, "sign_tests": tests}


def lookup(summary: dict, mode, split, reference, condition) -> dict | None:
    for row in summary["table"]:
        if (row["mode"], row["split"], row["reference"], row["condition"]) == (mode, split, reference, condition):
            return row
    return None


def render_report(summary: dict, ablation=None) -> str:
    metrics = (("sr", "SR"), ("osr", "OSR"), ("ndtw", "nDTW"), ("stop_rate", "Stop"))
    sections = [("stop", "attack", "Stop attacks (reference: attack trajectory)"),
                ("trajectory", "attack", "Trajectory attacks (reference: attack trajectory)"),
                ("trajectory", "original", "Trajectory attacks (reference: original instruction path)")]
    out = ["# Attack report", ""]
    for mode, ref, title in sections:
        if lookup(summary, mode, "train", ref, "attacked") is None:
            continue
        out += [f"## {title}", ""]
        head = "| split | n |" + "".join(f" {name} ✓ | {name} ✗ | {name} Δ |" for _, name in metrics)
        out += [head, "|" + "---|" * (2 + 3 * len(metrics))]
        for split in SPLITS:
            a = lookup(summary, mode, split, ref, "attacked")
            u = lookup(summary, mode, split, ref, "unattacked")
            if a is None or u is None:
                continue
            cells = "".join(f" {a[k]:.2f} | {u[k]:.2f} | {a[k] - u[k]:+.2f} |" for k, _ in metrics)
            out.append(f"| {split} | {a['instances']} |{cells}")
        out.append("")
    if summary.get("sign_tests"):
        out += ["## Paired sign tests (attacked > unattacked)", "", "| mode | split | metric | n | p |", "|---|---|---|---|---|"]
        out += [f"| {t['mode']} | {t['split']} | {t['metric']} | {t['instances']} | {t['p_value']:.4g} |"
                for t in summary["sign_tests"]]
        out.append("")
    if ablation:
        out += ["## Ablations (one variable at a time, train split)", "",
                "| variable | value | nDTW | SR |", "|---|---|---|---|"]
        out += [f"| {r['variable']} | {r['value']} | {r['train_ndtw']:.3f} | {r['train_sr']:.1f} |" for r in ablation]
        out.append("")
    return "\n".join(out)


def restrict_paraphrases(inst: AttackInstance, k: int) -> AttackInstance:
    """Keep only support episodes using the first ``k`` paraphrases of their trajectory."""
    import dataclasses

    keep = lambda eps: tuple(e for e in eps if paraphrase_index(e.episode_id) < k)  # noqa: E731
    return dataclasses.replace(inst, train_split=keep(inst.train_split) or inst.train_split[:1],
                               val_split=keep(inst.val_split) or inst.val_split[:1])


def run_ablation(pipe: Pipeline, instances) -> list[dict]:
    """Vary one hyperparameter at a time around the defaults; results cached by effective setting."""
    ab, base = pipe.cfg.ablation, pipe.cfg.attack
    default = {"steps_rendered": base.steps_rendered, "epsilon": base.epsilon,
               "instructions_per_trajectory": 3, "iterations": base.iterations}
    grid = [("steps_rendered", ab.steps_rendered), ("epsilon", ab.epsilon),
            ("instructions_per_trajectory", ab.instructions_per_trajectory), ("iterations", ab.iterations)]
    settings = []
    for var, values in grid:
        for v in values:
            s = dict(default)
            s[var] = v
            settings.append((var, v, tuple(sorted(s.items()))))
    unique = list(dict.fromkeys(key for _, _, key in settings))
    jobs, owners = [], []
    for key in unique:
        s = dict(key)
        for inst in instances:
            cfg = base.attack_config(inst.mode, _instance_seed(pipe.cfg.run.seed, inst.instance_id),
                                     steps_rendered=s["steps_rendered"], epsilon=s["epsilon"],
                                     iterations=s["iterations"])
            jobs.extend(pipe._jobs([restrict_paraphrases(inst, s["instructions_per_trajectory"])], [cfg]))
            owners.append(key)
    results: dict = {}
    for key, (nd, sr) in zip(owners, pipe._map(_ablation_job, jobs)):
        results.setdefault(key, []).append((nd, sr))
    rows = []
    for var, v, key in settings:
        vals = np.array(results[key])
        rows.append({"variable": var, "value": v, "train_ndtw": float(vals[:, 0].mean()),
                     "train_sr": float(vals[:, 1].mean()), "instances": len(vals)})
    return rows
