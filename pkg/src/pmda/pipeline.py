"""Stage implementations behind the command line.

Every stage reads its inputs from the manifest and from artifacts earlier
stages left in the work directory, writes its own artifacts there, and
returns (artifact paths, metric summary). Randomness comes from named
substreams of the manifest seed, so any stage can be rerun on its own.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .confusion import confuse
from .data import netpbm
from .data.dataset import Sample, stack_images
from .data.synthetic import SyntheticConfig, gen_synthetic
from .errors import MissingArtifactError, PMDAError
from .eval_tools import extract_collection, format_table, miou
from .inference import Ensemble, infer
from .manifest import load_manifest
from .networks import FineDiscriminator, SegNet
from .persist import (load_seg_model, load_style_model, load_style_space, save_network, save_seg_model,
                      save_style_model, save_style_space)
from .seg_train import predict, train_supervised
from .style_space import describe, fit_kpca
from .style_transfer import StyleTransferModel, make_pseudo_dataset, pretrain_autoencoder, train_style_transfer

log = logging.getLogger(__name__)


class Workspace:
    """Fixed layout of artifacts under the --out directory."""

    def __init__(self, out):
        self.out = Path(out)

    def path(self, *parts, mkdir=True):
        p = self.out.joinpath(*parts)
        if mkdir:
            p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @staticmethod
    def require(path):
        if not Path(path).exists():
            raise MissingArtifactError(path)
        return Path(path)

    style_model = property(lambda self: self.path("style", "style_model.pmdw"))
    space = property(lambda self: self.path("space", "style_space.pmdw"))
    baseline = property(lambda self: self.path("seg", "baseline.pmdw"))

    def pseudo_dir(self, domain):
        return self.path("pseudo", domain, "x", mkdir=False).parent

    def seg_model(self, domain):
        return self.path("seg", f"{domain}.pmdw")

    def confused_model(self, domain):
        return self.path("confused", f"{domain}.pmdw")


# ------------------------------------------------------------------ loading

def load_items(items):
    return [Sample(netpbm.read_image(it.image),
                   None if it.labels is None else netpbm.read_labels(it.labels), it.name) for it in items]


def _domain_index(manifest):
    if not manifest.data:
        raise PMDAError("manifest has no 'data' section; run gen-data first and use the manifest it writes")
    return list(enumerate(manifest.data["domains"]))


def load_pseudo(ws, domain):
    d = ws.require(ws.pseudo_dir(domain))
    index = json.loads(ws.require(d / "index.json").read_text())
    return [Sample(netpbm.read_image(ws.require(d / f"{n}.ppm")), netpbm.read_labels(ws.require(d / f"{n}.pgm")), n)
            for n in index["names"]]


# ------------------------------------------------------------------ stages

def stage_gen_data(manifest, ws):
    """Render the synthetic corpus and write a manifest that lists every file."""
    if manifest.synthetic is None:
        raise PMDAError("manifest has no 'synthetic' section to generate from")
    out_manifest = ws.path("manifest.json")
    if out_manifest.resolve() == manifest.path.resolve():
        raise PMDAError(f"gen-data would overwrite its input manifest {manifest.path}; choose another --out")
    syn = manifest.synthetic
    cfg = SyntheticConfig(n_classes=manifest.n_classes, domains=syn["styles"], unseen=syn["unseen"],
                          **{k: syn[k] for k in ("objects_per_scene", "size_range") if k in syn})
    data = gen_synthetic(cfg, syn["n_per_domain"], syn["image_size"], manifest.stage_seed("gen_data"),
                         n_test=syn["n_test"], n_source=syn["n_source"], n_source_heldout=syn["n_source_heldout"])
    artifacts = []

    def write(samples, *parts):
        rows = []
        for s in samples:
            img = ws.path("data", *parts, f"{s.name}.ppm")
            netpbm.write_image(img, s.image)
            artifacts.append(img)
            if s.labels is None:
                rows.append(str(img.relative_to(ws.out)))
                continue
            lab = img.with_suffix(".pgm")
            netpbm.write_labels(lab, s.labels)
            artifacts.append(lab)
            rows.append([str(img.relative_to(ws.out)), str(lab.relative_to(ws.out))])
        return rows

    section = {
        "source": {"train": write(data["source"], "source", "train"),
                   "heldout": write(data["source_heldout"], "source", "heldout")},
        "domains": [{"name": name, "train": write(d["train"], name, "train"), "test": write(d["test"], name, "test")}
                    for name, d in data["domains"].items()],
        "unseen": write(data["unseen"], "unseen"),
    }
    raw = dict(manifest.raw)
    raw["seed"] = manifest.seed
    raw["classes"] = manifest.classes
    raw["data"] = section
    out_manifest.write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")
    artifacts.append(out_manifest)
    counts = {"source": len(data["source"]), "unseen": len(data["unseen"]),
              **{n: len(d["train"]) for n, d in data["domains"].items()}}
    return artifacts, counts


def stage_train_style(manifest, ws):
    hp = manifest.stages["train_style"]
    _domain_index(manifest)
    content = load_items(manifest.data["source"]["train"])
    styles = [s for d in manifest.data["domains"] for s in load_items(d["train"])]
    model = StyleTransferModel.create(manifest.stage_seed("train_style", 0), widths=hp["widths"],
                                      lambda_style=hp["lambda_style"])
    ae = pretrain_autoencoder(model, content + styles, hp["ae_steps"], lr=hp["ae_lr"],
                              seed=manifest.stage_seed("train_style", 1), batch=hp["ae_batch"])
    trace = train_style_transfer(model, content, styles, hp["steps"], lr=hp["lr"],
                                 seed=manifest.stage_seed("train_style", 2), batch=hp["batch"],
                                 optimizer=hp["optimizer"])
    save_style_model(ws.style_model, model)
    trace_path = ws.path("style", "trace.json")
    trace_path.write_text(json.dumps({"autoencoder_mse": ae, "style": trace}) + "\n")
    metrics = {"ae_final_mse": ae[-1] if ae else None, "style_final_total": trace[-1][0] if trace else None}
    return [ws.style_model, trace_path], metrics


def stage_make_pseudo(manifest, ws, alpha=None):
    alpha = manifest.stages["make_pseudo"]["alpha"] if alpha is None else alpha
    model = load_style_model(ws.require(ws.style_model))
    source = load_items(manifest.data["source"]["train"])
    artifacts = []
    for i, dom in _domain_index(manifest):
        styles = load_items(dom["train"])
        pseudo, picks = make_pseudo_dataset(model, source, styles, alpha, manifest.stage_seed("make_pseudo", i))
        d = ws.pseudo_dir(dom["name"])
        d.mkdir(parents=True, exist_ok=True)
        for s in pseudo:
            netpbm.write_image(d / f"{s.name}.ppm", s.image)
            netpbm.write_labels(d / f"{s.name}.pgm", s.labels)
            artifacts += [d / f"{s.name}.ppm", d / f"{s.name}.pgm"]
        index = {"alpha": alpha, "names": [s.name for s in pseudo],
                 "styles": [styles[k].name for k in picks]}
        (d / "index.json").write_text(json.dumps(index, indent=1) + "\n")
        artifacts.append(d / "index.json")
    return artifacts, {"alpha": alpha}


def _map_jobs(fn, jobs, parallel):
    if parallel and parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def _seg_job(job):
    manifest_path, seed_override, out, domain, domain_id = job
    manifest = _reload(manifest_path, seed_override)
    ws = Workspace(out)
    hp = manifest.stages["train_seg"]
    if domain is None:
        data, padain_p, target = load_items(manifest.data["source"]["train"]), 0.0, ws.baseline
    else:
        data, padain_p, target = load_pseudo(ws, domain), hp["padain_p"], ws.seg_model(domain)
    net = SegNet.create(manifest.stage_seed("train_seg", "init"), manifest.n_classes, hp["widths"])
    model, trace = train_supervised(net, data, hp["steps"], lr=hp["lr"], batch=hp["batch"], padain_p=padain_p,
                                    seed=manifest.stage_seed("train_seg", 1), momentum=hp["momentum"],
                                    domain_id=domain_id)
    save_seg_model(target, model)
    return str(target), (float(np.mean(trace[-50:])) if trace else None)


def _reload(manifest_path, seed_override):
    manifest = load_manifest(manifest_path)
    if seed_override is not None:
        manifest.seed = seed_override
    return manifest


def stage_train_seg(manifest, ws, parallel=1):
    """Per-domain models on their pseudo-painting sets plus the source-only baseline.

    All models share one initialisation and one batch schedule, so the
    comparison against the baseline is paired.
    """
    seed_override = manifest.seed
    jobs = [(str(manifest.path), seed_override, str(ws.out), None, -1)]
    jobs += [(str(manifest.path), seed_override, str(ws.out), dom["name"], i) for i, dom in _domain_index(manifest)]
    for _, _, _, domain, _ in jobs[1:]:
        ws.require(ws.pseudo_dir(domain) / "index.json")
    results = _map_jobs(_seg_job, jobs, parallel)
    names = ["baseline"] + manifest.domain_names
    return [Path(p) for p, _ in results], {f"{n}_final_loss": loss for n, (_, loss) in zip(names, results)}


def _confuse_job(job):
    manifest_path, seed_override, out, domain_id = job
    manifest = _reload(manifest_path, seed_override)
    ws = Workspace(out)
    hp = manifest.stages["confuse"]
    dom = manifest.data["domains"][domain_id]
    model = load_seg_model(ws.require(ws.seg_model(dom["name"])))
    source = load_items(manifest.data["source"]["train"])
    target = load_items(dom["train"])
    heldout = None
    n_held = hp["heldout"]
    src_held = load_items(manifest.data["source"]["heldout"])
    if n_held and len(target) > n_held and src_held:
        heldout = (stack_images(src_held[:2 * n_held]), stack_images(target[-n_held:]))
        target = target[:-n_held]
    disc = FineDiscriminator.create(manifest.stage_seed("confuse", "disc", domain_id), model.net.feature_channels,
                                    model.class_count, hp["disc_width"])
    refined, trace, disc = confuse(model, source, target, disc, hp["steps"], lrs=(hp["seg_lr"], hp["disc_lr"]),
                                   padain_p=hp["padain_p"], seed=manifest.stage_seed("confuse", domain_id),
                                   lambda_adv=hp["lambda_adv"], batch=hp["batch"], momentum=hp["momentum"],
                                   heldout=heldout, eval_every=hp["eval_every"])
    out_model = ws.confused_model(dom["name"])
    save_seg_model(out_model, refined)
    disc_path = ws.path("confused", f"{dom['name']}.disc.pmdw")
    save_network(disc_path, disc)
    trace_path = ws.path("confused", f"{dom['name']}.trace.json")
    trace_path.write_text(json.dumps(trace.to_dict()) + "\n")
    return [str(out_model), str(disc_path), str(trace_path)], band_entry(trace.disc_acc, hp["steps"])


def band_entry(disc_acc, steps, lo=0.35, hi=0.65):
    """Whether held-out discriminator accuracy enters [lo, hi] after the first quarter of training."""
    late = [a for s, a in disc_acc if s > steps / 4]
    return {"acc_after_quarter": late, "entered_band": any(lo <= a <= hi for a in late) if late else None}


def stage_confuse(manifest, ws, parallel=1):
    jobs = [(str(manifest.path), manifest.seed, str(ws.out), i) for i, _ in _domain_index(manifest)]
    for _, dom in _domain_index(manifest):
        ws.require(ws.seg_model(dom["name"]))
    results = _map_jobs(_confuse_job, jobs, parallel)
    artifacts = [Path(p) for paths, _ in results for p in paths]
    metrics = {name: {"entered_band": m["entered_band"]} for name, (_, m) in zip(manifest.domain_names, results)}
    return artifacts, metrics


def stage_build_space(manifest, ws):
    hp = manifest.stages["build_space"]
    encoder = load_style_model(ws.require(ws.style_model)).encoder
    descs, domains = [], []
    for i, dom in _domain_index(manifest):
        for s in load_items(dom["train"]):
            descs.append(describe(encoder, s.image).vector)
            domains.append(i)
    space = fit_kpca(np.stack(descs), domains, d_max=hp["d_max"], variance_target=hp["variance_target"],
                     n_domains=len(manifest.data["domains"]))
    save_style_space(ws.space, space)
    return [ws.space], {"d": space.d, "explained_variance_ratio": space.explained_variance_ratio,
                        "n_train": space.n_train}


def load_ensemble(manifest, ws, k=None, mode=None):
    hp = manifest.stages["infer"]
    space = load_style_space(ws.require(ws.space))
    encoder = load_style_model(ws.require(ws.style_model)).encoder
    models = [load_seg_model(ws.require(ws.confused_model(name))) for name in manifest.domain_names]
    return Ensemble(models, space, encoder, hp["k"] if k is None else k, hp["fuse_mode"] if mode is None else mode)


def _test_splits(manifest):
    splits = {dom["name"]: dom["test"] for dom in manifest.data["domains"]}
    splits["combined"] = [it for dom in manifest.data["domains"] for it in dom["test"]]
    splits["unseen"] = manifest.data["unseen"]
    return {k: v for k, v in splits.items() if v}


def stage_infer(manifest, ws, image=None, k=None, mode=None, emit=print):
    ens = load_ensemble(manifest, ws, k, mode)
    if image is not None:
        img = netpbm.read_image(Workspace.require(image))
        labels, w = infer(ens, img)
        target = ws.path(f"{Path(image).stem}.labels.pgm")
        netpbm.write_labels(target, labels)
        emit(f"w = [{', '.join(f'{x:.4f}' for x in w)}]")
        return [target], {"w": [float(x) for x in w]}
    artifacts, weights = [], {}
    for split, items in _test_splits(manifest).items():
        if split == "combined":
            continue
        for s in load_items(items):
            labels, w = infer(ens, s.image)
            target = ws.path("pred", split, f"{s.name}.labels.pgm")
            netpbm.write_labels(target, labels)
            artifacts.append(target)
            weights[f"{split}/{s.name}"] = [float(x) for x in w]
    wpath = ws.path("pred", "weights.json")
    wpath.write_text(json.dumps(weights, indent=1, sort_keys=True) + "\n")
    return artifacts + [wpath], {"images": len(weights)}


# ------------------------------------------------------------------ evaluation

def _label_files(directory):
    out = {}
    for p in sorted(Path(directory).glob("*.pgm")):
        stem = p.name[:-len(".labels.pgm")] if p.name.endswith(".labels.pgm") else p.stem
        out[stem] = p
    return out


def evaluate_dirs(pred_dir, gt_dir, n_classes):
    preds = _label_files(Workspace.require(pred_dir))
    gts = _label_files(Workspace.require(gt_dir))
    if not gts:
        raise MissingArtifactError(Path(gt_dir) / "*.pgm")
    missing = [n for n in gts if n not in preds]
    if missing:
        raise MissingArtifactError(Path(pred_dir) / f"{missing[0]}.labels.pgm")
    names = sorted(gts)
    return miou([netpbm.read_labels(preds[n]) for n in names], [netpbm.read_labels(gts[n]) for n in names],
                n_classes)


def _result_dict(res):
    return {"miou": round(res.mean_float, 6), "miou_exact": f"{res.mean.numerator}/{res.mean.denominator}",
            "per_class": [None if v is None else round(float(v), 6) for v in res.per_class]}


def experiment_report(manifest, ws):
    """mIoU of every model on every test split, plus the directional comparisons."""
    ens = load_ensemble(manifest, ws)
    baseline = load_seg_model(ws.require(ws.baseline))
    pseudo = {n: load_seg_model(ws.require(ws.seg_model(n))) for n in manifest.domain_names}
    confused = dict(zip(manifest.domain_names, ens.models))
    models = {"baseline": baseline, **{f"pseudo:{n}": m for n, m in pseudo.items()},
              **{f"confused:{n}": m for n, m in confused.items()}}
    results, tables = {}, {}
    for split, items in _test_splits(manifest).items():
        samples = load_items(items)
        images = stack_images(samples)
        gts = [s.labels for s in samples]
        rows = {name: miou(list(predict(m, images)), gts, manifest.n_classes) for name, m in models.items()}
        rows["fused"] = miou([infer(ens, s.image)[0] for s in samples], gts, manifest.n_classes)
        results[split] = {name: _result_dict(r) for name, r in rows.items()}
        tables[split] = format_table(rows, manifest.classes)
    checks = directional_checks(results, manifest.domain_names)
    return {"splits": results, "checks": checks}, tables


def directional_checks(results, domains, margin=0.02):
    score = lambda split, model: results[split][model]["miou"]  # noqa: E731
    checks = {"pseudo_beats_baseline": {d: score(d, f"pseudo:{d}") > score(d, "baseline")
                                        for d in domains if d in results}}
    if "combined" in results:
        best = max(score("combined", f"confused:{d}") for d in domains)
        fused = score("combined", "fused")
        checks["fused_combined"] = {"fused": fused, "best_single": best, "within_margin": fused >= best - margin,
                                    "strictly_better": fused > best}
    if "unseen" in results:
        singles = {d: score("unseen", f"confused:{d}") for d in domains}
        fused = score("unseen", "fused")
        checks["fused_unseen"] = {"fused": fused, "singles": singles,
                                  "within_margin": all(fused >= v - margin for v in singles.values())}
    return checks


def stage_evaluate(manifest, ws, pred=None, gt=None, emit=print):
    report_json = ws.path("report", "metrics.json")
    report_txt = ws.path("report", "metrics.txt")
    if pred is not None or gt is not None:
        if pred is None or gt is None:
            raise PMDAError("--pred and --gt must be given together")
        res = evaluate_dirs(pred, gt, manifest.n_classes)
        report = {"pred": str(pred), "gt": str(gt), **_result_dict(res)}
        text = format_table({"prediction": res}, manifest.classes)
        emit(f"mIoU {res.mean_float:.4f}")
    else:
        report, tables = experiment_report(manifest, ws)
        text = "\n\n".join(f"[{split}]\n{table}" for split, table in tables.items())
        text += "\n\nchecks: " + json.dumps(report["checks"], sort_keys=True)
        emit(text)
    report_json.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    report_txt.write_text(text + "\n")
    metrics = report.get("checks", {"miou": report.get("miou")})
    return [report_json, report_txt], metrics


def _class_id(manifest, value):
    if str(value).isdigit():
        cid = int(value)
    elif value in manifest.classes:
        cid = manifest.classes.index(value)
    else:
        raise PMDAError(f"unknown class {value!r}")
    if not 0 < cid < manifest.n_classes:
        raise PMDAError(f"class id {cid} is not an object class")
    return cid


def stage_extract_segments(manifest, ws, class_name=None, pred=None, min_area=4):
    """Cut every segment of a class out of the test images into a comparative collection.

    Segments come from fused predictions in ``pred`` (a directory of
    <stem>.labels.pgm) when given, otherwise from the ground truth.
    """
    classes = [_class_id(manifest, class_name)] if class_name is not None else list(range(1, manifest.n_classes))
    items = []
    for split, split_items in _test_splits(manifest).items():
        if split == "combined":
            continue
        preds = _label_files(Workspace.require(Path(pred) / split)) if pred is not None else {}
        for s in load_items(split_items):
            if pred is not None:
                labels = netpbm.read_labels(Workspace.require(preds.get(s.name, Path(pred) / split / s.name)))
            else:
                labels = s.labels
            items.append((f"{split}/{s.name}", s.image, labels))
    artifacts, counts = [], {}
    for cid in classes:
        name = manifest.classes[cid].replace(" ", "_")
        patches = extract_collection(items, cid, min_area=min_area)
        index = []
        for j, p in enumerate(patches):
            target = ws.path("segments", name, f"{j:04d}.ppm")
            netpbm.write_image(target, p.pixels)
            artifacts.append(target)
            index.append({"file": target.name, "image": p.image_id, "bbox": list(p.bbox)})
        idx = ws.path("segments", name, "index.json")
        idx.write_text(json.dumps(index, indent=1) + "\n")
        artifacts.append(idx)
        counts[name] = len(patches)
    return artifacts, counts
