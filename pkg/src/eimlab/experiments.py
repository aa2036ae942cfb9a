"""Experiment runners behind the CLI. Each takes a validated config and an
output directory, writes its tables, images and plots there, and returns a
short summary dict."""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from eimlab import plots
from eimlab.config import validate
from eimlab.denoisers import gaussian_factor_model
from eimlab.diffusion import SamplerConfig, build_schedule, derive_stream
from eimlab.distill import HSDSConfig
from eimlab.io import read_csv, write_csv, write_json
from eimlab.metrics.probing import build_probe_dataset, eval_transfer, shuffled_control
from eimlab.metrics.quality import masked_background_metrics, psnr, ssim
from eimlab.metrics.sde import scene_sde
from eimlab.metrics.semantic import semantic_loss_oracle, semantic_loss_sweep
from eimlab.pipeline import EditRequest, eim_edit, reverse_edit, target_coords, threshold_sweep
from eimlab.scenes import FACTORS, FactorVector, export_dataset, render_scene, sample_dataset, write_pgm, write_ppm
from eimlab.text import EditPlan, PlanEntry, SemanticVocabulary
from eimlab.theory import prop1_mc, prop1_summary, prop2_check, write_prop1_csv

PRIMARY_TABLE = {
    "edit": "edits.csv",
    "sde": "sde_summary.csv",
    "probe": "probe.csv",
    "theory": "prop1.csv",
    "train": "loss.csv",
    "semantic-loss": "semantic_loss.csv",
}


def derived_seed(root: int, task: int) -> int:
    return int(np.random.SeedSequence(int(root), spawn_key=(int(task),)).generate_state(1)[0])


def pmap(fn, items, jobs: int = 1) -> list:
    """Order-preserving map, threaded when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as ex:
        return list(ex.map(fn, items))


def sampler_from(cfg) -> SamplerConfig:
    return SamplerConfig(cfg["guidance_scale"], 50, cfg.get("forward_fraction", 0.75), cfg.get("deterministic_sampler", False))


def hsds_from(cfg) -> HSDSConfig:
    return HSDSConfig(cfg["lam"], cfg["eta_start"], cfg["eta_end"], cfg["iterations"], cfg["sign"], cfg["z_s_mode"],
                      cfg.get("snapshot_every", 0))


def make_scene(spec: dict):
    assign = {"size": "medium", "xpos": "center", "ypos": "middle", **spec}
    return render_scene(FactorVector.from_assignment(assign))


def build_model(cfg, name: str | None = None):
    """(denoiser, vocab, schedule) for a config's model selection."""
    name = name or cfg["model"]
    vocab = SemanticVocabulary()
    sched = build_schedule()
    if name.startswith("analytic"):
        variant = name.split("-", 1)[1]
        den = gaussian_factor_model(vocab, sched, variant, seed=cfg.get("model_seed", 0),
                                    entanglement=cfg.get("entanglement", 0.35))
        return den, vocab, sched
    if "model_path" not in cfg:
        raise ValueError(f"model {name!r} needs model_path pointing at a trained model file")
    from eimlab.denoisers.toy import ToyDenoiser, load_model
    from eimlab.training import PatchCodec

    model, meta = load_model(cfg["model_path"])
    if f"toy-{model.mode}" != name:
        raise ValueError(f"{cfg['model_path']} holds a {model.mode} model, config asks for {name}")
    vocab = SemanticVocabulary.from_json(json.dumps(meta["vocab"])) if meta.get("vocab") else vocab
    codec = PatchCodec.from_json(json.dumps(meta["codec"]))
    return ToyDenoiser(model, vocab, codec), vocab, sched


# -- edit -----------------------------------------------------------------------


def run_edit(cfg, out: Path, jobs: int = 1) -> dict:
    den, vocab, sched = build_model(cfg)
    scene = make_scene(cfg["scene"])
    assign = scene.assignment
    entries = []
    for e in cfg["edits"]:
        alpha = cfg.get("alpha", e.get("alpha", 1.0))
        entries.append(PlanEntry(e["attribute"], assign[e["attribute"]], e["target"], alpha))
    plan = EditPlan(tuple(entries))
    base = EditRequest(scene, plan, sampler_from(cfg), hsds_from(cfg), pooled_extra=cfg["pooled_extra"])
    write_ppm(out / "source.ppm", scene.raster)
    write_pgm(out / "source_object.pgm", scene.object_mask)
    write_pgm(out / "source_background.pgm", scene.background_mask)
    names = tuple(getattr(den, "factor_names", FACTORS))
    target = target_coords(scene.factors.coords(), plan, names)

    def one(k):
        rep = eim_edit(replace(base, seed=derived_seed(cfg["seed"], k)), den, vocab, sched)
        back = reverse_edit(rep, den, sched) if cfg["reverse"] else None
        return k, rep, back

    rows = []
    recovered = []
    for k, rep, back in pmap(one, range(cfg["seeds"]), jobs):
        write_ppm(out / f"edited_s{k}.ppm", rep.edited_raster)
        (out / f"edit_report_s{k}.json").write_text(rep.to_json() + "\n")
        if rep.trace is not None:
            rep.trace.to_csv(out / f"hsds_trace_s{k}.csv")
        mp, ms = masked_background_metrics(scene, rep.edited_raster)
        row = {
            "seed_index": k, "seed": rep.seed, "t_star": rep.t_star,
            "psnr": psnr(scene.raster, rep.edited_raster), "ssim": ssim(scene.raster, rep.edited_raster),
            "masked_psnr": mp, "masked_ssim": ms,
            "max_drift": max(rep.drift.values(), default=0.0),
            "image_direction_norm": float(np.linalg.norm(rep.n_image.delta)),
        }
        for j, name in enumerate(names):
            row[f"source_{name}"] = float(rep.source_coords[j])
            row[f"target_{name}"] = float(target[j])
            row[f"edited_{name}"] = float(rep.edited_coords[j])
        if back is not None:
            write_ppm(out / f"reversed_s{k}.ppm", back.edited_raster)
            for j, name in enumerate(names):
                row[f"reversed_{name}"] = float(back.edited_coords[j])
        rows.append(row)
        recovered.append(rep.edited_coords)
    write_csv(out / "edits.csv", rows)
    mean_rec = np.mean(recovered, axis=0)
    plots.bar_chart(out / "factors.svg", list(names),
                    {"source": scene.factors.coords().tolist(), "target": target.tolist(), "edited": mean_rec.tolist()},
                    ylabel="factor coordinate", title="EIM edit")
    summary = {"recovered": dict(zip(names, map(float, mean_rec))), "target": dict(zip(names, map(float, target)))}

    if "alpha_sweep" in cfg:
        sweep_rows, corrupt = threshold_sweep(replace(base, seed=derived_seed(cfg["seed"], 0)), cfg["alpha_sweep"],
                                              den, vocab, sched)
        write_csv(out / "alpha_sweep.csv", [r.__dict__ for r in sweep_rows])
        xs = [r.alpha for r in sweep_rows]
        plots.line_chart(out / "alpha_sweep.svg", xs,
                         {"target delta": [r.target_delta for r in sweep_rows],
                          "max off-target drift": [r.max_drift for r in sweep_rows]},
                         xlabel="edit degree alpha", ylabel="factor change")
        summary["corruption_alpha"] = corrupt
    return summary


# -- sde ------------------------------------------------------------------------


def run_sde(cfg, out: Path, jobs: int = 1) -> dict:
    scenes = sample_dataset(cfg["scenes"], derive_stream(cfg["seed"], 0))
    sampler = sampler_from(cfg)
    models = {name: build_model(cfg, name) for name in cfg["models"]}
    n = cfg["scenes"]
    tasks = [(name, b, i) for name in cfg["models"] for b in range(cfg["batches"]) for i in range(n)]

    def one(task):
        name, b, i = task
        den, vocab, sched = models[name]
        val = scene_sde(scenes[i], den, vocab, sched, cfg["strength"], cfg["seeds"],
                        derived_seed(cfg["seed"], 1 + b * n + i), tuple(cfg["attributes"]), sampler)
        return {"model": name, "batch": b, "scene": i, "sde": val}

    rows = pmap(one, tasks, jobs)
    write_csv(out / "sde.csv", rows)
    summary_rows = []
    for b in range(cfg["batches"]):
        row = {"batch": b}
        for name in cfg["models"]:
            row[name] = float(np.mean([r["sde"] for r in rows if r["model"] == name and r["batch"] == b]))
        summary_rows.append(row)
    write_csv(out / "sde_summary.csv", summary_rows)
    plots.bar_chart(out / "sde.svg", [str(r["batch"]) for r in summary_rows],
                    {name: [r[name] for r in summary_rows] for name in cfg["models"]},
                    ylabel="mean SDE (lower is more disentangled)", title="SDE per seed batch")
    means = {name: float(np.mean([r[name] for r in summary_rows])) for name in cfg["models"]}
    out_doc = {"mean_sde": means}
    if len(cfg["models"]) == 2:
        a, b = cfg["models"]
        out_doc["batches_ordered"] = int(sum(r[a] < r[b] for r in summary_rows))
    return out_doc


# -- semantic loss ----------------------------------------------------------------


def run_semantic_loss(cfg, out: Path, jobs: int = 1) -> dict:
    den, vocab, sched = build_model(cfg)
    scene = make_scene(cfg["scene"])
    sampler = sampler_from(cfg)
    cond = cfg["conditioned"]
    rows_mc = semantic_loss_sweep(scene, cfg["strengths"], den, sched, cond, cfg["seeds"], cfg["seed"], sampler)
    oracle = None
    if cfg["model"].startswith("analytic"):
        oracle = semantic_loss_oracle(den, scene, cfg["strengths"], sched, cond, sampler)
    names = tuple(getattr(den, "factor_names", FACTORS))
    rows = []
    for i, r in enumerate(rows_mc):
        for j, name in enumerate(names):
            row = {"strength": r.strength, "timestep": r.timestep, "factor": name, "conditioned": name in cond,
                   "mean": float(r.mean[j]), "std": float(r.std[j])}
            if oracle is not None:
                row["oracle_mean"] = float(oracle[i].mean[j])
                row["oracle_std"] = float(oracle[i].std[j])
            rows.append(row)
    write_csv(out / "semantic_loss.csv", rows)
    plots.line_chart(out / "semantic_loss.svg", [r.strength for r in rows_mc],
                     {f"{n}{'' if n in cond else ' (free)'}": [r.std[j] for r in rows_mc] for j, n in enumerate(names)},
                     xlabel="forward strength", ylabel="recovered std across seeds")
    return {"final_std": dict(zip(names, map(float, rows_mc[-1].std)))}


# -- theory -------------------------------------------------------------------------


def run_theory(cfg, out: Path, jobs: int = 1) -> dict:
    reports = []
    for m, d, a in itertools.product(cfg["m"], cfg["d"], cfg["alpha"]):
        reports.append(prop1_mc(m, d, a, cfg["samples"], derived_seed(cfg["seed"], len(reports)), cfg["c"], jobs))
    spots = [prop1_mc(m, 4, 1.0, cfg["spot_samples"], derived_seed(cfg["seed"], 1000 + m), cfg["c"], jobs)
             for m in (1, 2)]
    write_prop1_csv(reports, out / "prop1.csv")
    write_prop1_csv(spots, out / "prop1_spot.csv")
    (out / "prop1_summary.txt").write_text(prop1_summary(reports + spots))
    rng = derive_stream(cfg["seed"], 5000)
    dirs = rng.standard_normal((cfg["prop2_m"], cfg["prop2_d"]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dot, norm = prop2_check(dirs)
    write_csv(out / "prop2.csv", [{"m": cfg["prop2_m"], "d": cfg["prop2_d"], "max_abs_inner": dot, "max_norm_error": norm}])
    return {"max_z": max(r.z_score for r in reports + spots), "prop2_max_inner": dot}


# -- training / probing ---------------------------------------------------------


def train_toy(cfg, mode: str, seed: int):
    import torch

    from eimlab.denoisers.toy import ToyAttentionModel, ToyDenoiser
    from eimlab.training import PatchCodec, TrainConfig, train_denoiser

    torch.manual_seed(seed)
    vocab, sched = SemanticVocabulary(), build_schedule()
    scenes = sample_dataset(cfg["dataset_size"], derive_stream(seed, 0))
    codec = PatchCodec.fit([s.raster for s in scenes])
    model = ToyAttentionModel(mode, cfg["layers"], cfg["heads"], codec.width, vocab.width, seed=seed)
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["momentum"], seed, cfg["prompt_dropout"])
    model, losses = train_denoiser(model, vocab, codec, scenes, tcfg, sched)
    return ToyDenoiser(model, vocab, codec), losses, scenes, tcfg


def save_toy(den, path: Path, tcfg) -> None:
    from eimlab.denoisers.toy import save_model
    from eimlab.training import config_dict

    save_model(den.model, path, config_dict(tcfg), den.vocab, {"codec": json.loads(den.codec.to_json())})


def run_train(cfg, out: Path, jobs: int = 1) -> dict:
    den, losses, scenes, tcfg = train_toy(cfg, cfg["mode"], cfg["seed"])
    save_toy(den, out / "model.bin", tcfg)
    write_csv(out / "loss.csv", [{"epoch": i, "loss": v} for i, v in enumerate(losses)])
    plots.line_chart(out / "loss.svg", list(range(len(losses))), {cfg["mode"]: losses}, xlabel="epoch",
                     ylabel="epsilon MSE")
    if cfg["export_dataset"]:
        export_dataset(scenes, out / "dataset", {"n": cfg["dataset_size"], "seed": cfg["seed"]})
    return {"initial_loss": losses[0], "final_loss": losses[-1]}


def run_probe(cfg, out: Path, jobs: int = 1) -> dict:
    sched = build_schedule()
    sampler = SamplerConfig(cfg["guidance_scale"])

    def one(mode):
        if mode in cfg["model_paths"]:
            den, _, _ = build_model({"model": f"toy-{mode}", "model_path": cfg["model_paths"][mode]})
        else:
            den, losses, _, tcfg = train_toy(cfg, mode, cfg["seed"])
            save_toy(den, out / f"model_{mode}.bin", tcfg)
            write_csv(out / f"loss_{mode}.csv", [{"epoch": i, "loss": v} for i, v in enumerate(losses)])
        records = build_probe_dataset(den, ["red", "green", "blue"], cfg["per_color"], sched, cfg["seed"],
                                      sampler=sampler, record_steps=cfg.get("record_steps"))
        return mode, eval_transfer(records, mode, seed=cfg["seed"]), shuffled_control(records, cfg["seed"])

    results = pmap(one, cfg["modes"], jobs)
    rows = []
    for mode, res, control in results:
        for layer, (tr, sa) in enumerate(zip(res.transfer, res.self_accuracy)):
            rows.append({"mode": mode, "layer": layer, "transfer_accuracy": tr, "self_accuracy": sa,
                         "shuffled_control": control})
    write_csv(out / "probe.csv", rows)
    layers = [f"layer {i}" for i in range(len(results[0][1].transfer))]
    plots.bar_chart(out / "probe.svg", layers, {mode: res.transfer for mode, res, _ in results},
                    ylabel="colour probe accuracy on <object> maps", hline=0.5)
    return {mode: {"average": res.average, "distance_from_chance": res.distance_from_chance}
            for mode, res, _ in results}


# -- sweep --------------------------------------------------------------------------


def grid_points(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must be nonempty")
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def run_sweep(cfg, out: Path, jobs: int = 1) -> dict:
    base = cfg["base"]
    command = base["command"]
    points = grid_points(cfg["grid"])
    runs = out / "runs"
    runs.mkdir(exist_ok=True)

    def one(item):
        k, point = item
        sub = {**base, **point, "seed": derived_seed(cfg["seed"], k)}
        run_dir = runs / f"run_{k:03d}"
        run_dir.mkdir(exist_ok=True)
        try:
            sub = validate(command, sub)
            RUNNERS[command](sub, run_dir, 1)
            return k, point, "ok", read_csv(run_dir / PRIMARY_TABLE[command])
        except Exception as exc:  # recorded, the sweep carries on
            return k, point, f"failed: {type(exc).__name__}: {exc}", []

    combined, status = [], []
    for k, point, state, table in pmap(one, enumerate(points), jobs):
        status.append({"run": k, **point, "status": state})
        for row in table:
            combined.append({"run": k, **point, **row})
    fields = []
    for row in combined:
        fields.extend(f for f in row if f not in fields)
    write_csv(out / "combined.csv", combined, fields or ["run"])
    write_csv(out / "status.csv", status)
    keys = sorted(cfg["grid"])
    if command == "edit" and len(keys) == 1 and combined:
        key = keys[0]
        attr = base["edits"][0]["attribute"]
        xs = sorted({r[key] for r in combined})
        ys = [float(np.mean([float(r[f"edited_{attr}"]) for r in combined if r[key] == x])) for x in xs]
        drift = [float(np.mean([float(r["max_drift"]) for r in combined if r[key] == x])) for x in xs]
        plots.line_chart(out / "sweep.svg", xs, {f"edited {attr}": ys, "max drift": drift}, xlabel=key,
                         ylabel="factor coordinate")
    failed = sum(s["status"] != "ok" for s in status)
    return {"runs": len(points), "failed": failed}


RUNNERS = {
    "edit": run_edit,
    "sde": run_sde,
    "semantic-loss": run_semantic_loss,
    "theory": run_theory,
    "train": run_train,
    "probe": run_probe,
    "sweep": run_sweep,
}
