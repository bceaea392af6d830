"""Command-line surface: train, predict, evaluate, render-map, synth, gpd-fit.

Flags may also come from a line-oriented `key = value` config file
(--config); explicit flags win. Exit codes: 0 success, 2 usage/input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import dataio, evt, metrics, network
from .dataio import FormatError
from .network import TrainingDivergedError

TILE = 1024  # pixels per prediction tile


def _fail(msg, code=2):
    print(f"owhsi: error: {msg}", file=sys.stderr)
    return code


def _load_config(path):
    cfg = {}
    with open(path) as f:
        for ln in f:
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise FormatError(f"bad config line: {ln!r}")
            key, val = (s.strip() for s in ln.split("=", 1))
            cfg[key.replace("-", "_")] = val
    return cfg


_BOOL = {"true": True, "1": True, "yes": True,
         "false": False, "0": False, "no": False}


def _merge_config(args):
    """Fill unset argparse values from the config file, typed per default."""
    if not getattr(args, "config", None):
        return args
    cfg = _load_config(args.config)
    for key, raw in cfg.items():
        if not hasattr(args, key):
            continue
        cur = getattr(args, key)
        if cur is None or cur is False:
            if isinstance(cur, bool):
                setattr(args, key, _BOOL[raw.lower()])
            else:
                setattr(args, key, raw)
    return args


def _get(args, name, cast, default=None, required=False):
    val = getattr(args, name, None)
    if val is None:
        if required:
            raise ValueError(f"missing required option --{name.replace('_', '-')}")
        return default
    return cast(val)


def _num_classes(args, labels):
    c = _get(args, "classes", int)
    if c is None:
        c = int(labels.max())
    return c


def _out_path(args, suffix, flag=None):
    if flag and getattr(args, flag, None):
        return getattr(args, flag)
    out = getattr(args, "out", None)
    if out is None:
        raise ValueError("missing --out prefix")
    return f"{out}.{suffix}"


def cmd_train(args):
    cube = dataio.read_cube(_get(args, "cube", str, required=True))
    labels = dataio.read_labels(_get(args, "labels", str, required=True))
    if labels.shape != cube.shape[:2]:
        raise ValueError(
            f"label raster {labels.shape} does not match cube {cube.shape[:2]}")
    num_classes = _num_classes(args, labels)
    seed = _get(args, "seed", int, 0)
    nos = _get(args, "nos", int, 20)

    if getattr(args, "split", None):
        split = dataio.read_split(args.split)
        nos = split.nos
    else:
        split = dataio.sample_split(labels, nos, seed, num_classes)

    norm, _ = dataio.normalize(cube)
    samples = dataio.build_sample_set(norm, split)
    net = network.build_network(cube.shape[2], num_classes, seed)
    config = network.TrainConfig(
        nos=nos,
        batch_size=_get(args, "batch_size", int, 32),
        phase1_epochs=_get(args, "phase1_epochs", int, 170),
        phase2_epochs=_get(args, "phase2_epochs", int, 30),
        patience=_get(args, "patience", int, 5),
        loss_weights=network.LossWeights(
            _get(args, "lambda_c", float, 0.5),
            _get(args, "lambda_r", float, 0.5)),
        seed=seed,
    )
    net, rep = network.train(net, samples, config)
    print(f"trained {rep.epochs_phase1}+{rep.epochs_phase2} epochs "
          f"in {rep.wall_seconds:.1f}s, final loss {rep.total[-1]:.5f}",
          file=sys.stderr)

    losses = network.reconstruction_errors(net, samples.patches)
    tau = evt.tail_size(nos, num_classes, "global")
    if tau > len(losses):
        warnings.warn(f"tail size {tau} exceeds {len(losses)} training "
                      f"losses; clamping")
        tau = len(losses)
    global_model = evt.fit_gpd(losses, tau)
    grouped = {int(c): losses[samples.labels == c]
               for c in np.unique(samples.labels)}
    classwise = evt.fit_classwise(grouped, nos)
    for cls in classwise.fallback_classes:
        print(f"class {cls}: too few losses for a tail model, "
              f"falls back to global", file=sys.stderr)

    network.save_weights(net, _out_path(args, "weights", "weights"))
    evt.save_gpd_models(_out_path(args, "gpd", "gpd"), global_model, classwise)
    if not getattr(args, "split", None):
        dataio.write_split(split, _out_path(args, "split"))
    report_doc = {
        "epochs_phase1": rep.epochs_phase1,
        "epochs_phase2": rep.epochs_phase2,
        "loss_total": rep.total,
        "loss_classification": rep.classification,
        "loss_reconstruction": rep.reconstruction,
        "tau_global": tau,
        "classwise_fallback": classwise.fallback_classes,
    }
    with open(_out_path(args, "report.json", "report"), "w") as f:
        json.dump(report_doc, f, indent=2)
        f.write("\n")
    return 0


def _scores_for_mode(mode, v, probs, closed, gpd_path, z, fit_ctx):
    """Per-instance unknown score and open label for evaluated pixels."""
    if mode == "closed":
        return np.zeros_like(v), closed.copy()
    if mode == "softmax":
        top = probs.max(axis=1)
        open_labels = np.asarray(evt.softmax_threshold_baseline(probs, z))
        return (1.0 - top).astype(np.float64), open_labels
    if gpd_path is None and fit_ctx is None:
        raise ValueError(f"mode {mode} requires --gpd (or --fit-on-predict)")
    if fit_ctx is not None:
        nos, num_classes = fit_ctx
        tau = min(evt.tail_size(nos, num_classes, "global"), len(v))
        global_model = evt.fit_gpd(v, tau)
        grouped = {int(c): v[closed == c] for c in np.unique(closed)}
        classwise = evt.fit_classwise(grouped, nos)
    else:
        global_model, classwise = evt.load_gpd_models(gpd_path)
    if mode == "mdl4ow":
        scores = evt.unknown_score(global_model, v)
    elif mode == "mdl4ow-c":
        scores = np.empty_like(v)
        for cls in np.unique(closed):
            m = classwise.model_for(int(cls), global_model)
            sel = closed == cls
            scores[sel] = evt.unknown_score(m, v[sel])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    open_labels = np.where(scores < z, closed, evt.UNKNOWN)
    return scores, open_labels


def cmd_predict(args):
    mode = _get(args, "mode", str, "mdl4ow")
    if mode not in ("closed", "softmax", "mdl4ow", "mdl4ow-c"):
        raise ValueError(f"unknown mode {mode!r}")
    cube = dataio.read_cube(_get(args, "cube", str, required=True))
    net = network.load_weights(_get(args, "weights", str, required=True))
    if cube.shape[2] != net.bands:
        raise ValueError(f"cube has {cube.shape[2]} bands, "
                         f"network expects {net.bands}")
    z = _get(args, "z", float, 0.5)
    if not 0.0 < z < 1.0:
        raise ValueError(f"z must be in (0,1), got {z}")
    all_pixels = bool(getattr(args, "all_pixels", False))
    if all_pixels:
        h, w = cube.shape[:2]
        coords = np.argwhere(np.ones((h, w), dtype=bool))
    else:
        labels = dataio.read_labels(_get(args, "labels", str, required=True))
        if labels.shape != cube.shape[:2]:
            raise ValueError("label raster does not match cube shape")
        coords = np.argwhere(labels > 0)
    gpd_path = getattr(args, "gpd", None)
    if mode in ("mdl4ow", "mdl4ow-c") and gpd_path is None \
            and not getattr(args, "fit_on_predict", False):
        raise ValueError(f"mode {mode} requires --gpd")

    norm, _ = dataio.normalize(cube)
    h, w = cube.shape[:2]
    closed = np.zeros(len(coords), dtype=np.int64)
    v = np.zeros(len(coords), dtype=np.float64)
    probs = np.zeros((len(coords), net.num_classes), dtype=np.float32)
    for start in range(0, len(coords), TILE):
        tile = coords[start:start + TILE]
        patches = dataio.extract_patches(norm, tile)
        lab, pr, loss = network.infer_outputs(net, patches)
        closed[start:start + TILE] = lab
        probs[start:start + TILE] = pr
        v[start:start + TILE] = loss

    fit_ctx = None
    if getattr(args, "fit_on_predict", False):
        fit_ctx = (_get(args, "nos", int, required=True), net.num_classes)
    scores, open_labels = _scores_for_mode(
        mode, v, probs, closed, gpd_path, z, fit_ctx)
    open_labels = np.where(open_labels == evt.UNKNOWN,
                           net.num_classes + 1, open_labels)

    rows, cols = coords[:, 0], coords[:, 1]
    closed_r = np.zeros((h, w), dtype=np.uint16)
    open_r = np.zeros((h, w), dtype=np.uint16)
    loss_r = np.zeros((h, w, 1), dtype=np.float32)
    score_r = np.zeros((h, w, 1), dtype=np.float32)
    closed_r[rows, cols] = closed
    open_r[rows, cols] = open_labels
    loss_r[rows, cols, 0] = v
    score_r[rows, cols, 0] = scores

    dataio.write_labels(closed_r, _out_path(args, "closed.hsil"))
    dataio.write_labels(open_r, _out_path(args, "open.hsil"))
    dataio.write_cube(loss_r, _out_path(args, "loss.hsic"))
    dataio.write_cube(score_r, _out_path(args, "score.hsic"))
    return 0


def cmd_evaluate(args):
    pred = dataio.read_labels(_get(args, "pred", str, required=True))
    gt = dataio.read_labels(_get(args, "labels", str, required=True))
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} does not match "
                         f"ground truth {gt.shape}")
    num_classes = _get(args, "classes", int, required=True)
    cm = metrics.confusion(pred, gt, num_classes)
    n_test = _get(args, "test_classes", int)
    if n_test is None:
        n_test = num_classes + (1 if (gt == num_classes + 1).any() else 0)
    rep = metrics.report(cm, num_classes, n_test)
    doc = rep.to_json()
    print(doc)
    out = getattr(args, "out", None)
    if out:
        with open(out, "w") as f:
            f.write(doc)
            f.write("\n")
    return 0


def _load_palette(path):
    palette = {}
    with open(path) as f:
        for ln in f:
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            parts = ln.split()
            if len(parts) != 4:
                raise FormatError(f"bad palette line: {ln!r}")
            palette[int(parts[0])] = tuple(int(v) for v in parts[1:])
    return palette


def cmd_render_map(args):
    raster = dataio.read_labels(_get(args, "pred", str, required=True))
    palette = _load_palette(_get(args, "palette", str, required=True))
    num_classes = _get(args, "classes", int)
    h, w = raster.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for code in np.unique(raster):
        code = int(code)
        if code in palette:
            rgb = palette[code]
        elif code == 0 or (num_classes is not None and code == num_classes + 1):
            rgb = (0, 0, 0)  # unlabeled / unknown default to black
        else:
            raise ValueError(f"palette has no entry for class code {code}")
        img[raster == code] = rgb
    out = _get(args, "out", str, required=True)
    with open(out, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    return 0


def cmd_synth(args):
    spec = dataio.load_synth_spec(_get(args, "spec", str, required=True))
    seed = _get(args, "seed", int, 0)
    cube, labels = dataio.synth_cube(spec, seed)
    dataio.write_cube(cube, _out_path(args, "cube.hsic", "cube"))
    dataio.write_labels(labels, _out_path(args, "labels.hsil", "labels"))
    return 0


def cmd_gpd_fit(args):
    path = _get(args, "losses", str, required=True)
    losses = np.loadtxt(path, dtype=np.float64, ndmin=1)
    tau = _get(args, "tau", int)
    if tau is None:
        nos = _get(args, "nos", int, required=True)
        num_classes = _get(args, "classes", int, 1)
        tau = evt.tail_size(nos, num_classes,
                            _get(args, "tail_mode", str, "global"))
    model = evt.fit_gpd(losses, tau)
    line = f"global {model.xi:.9g} {model.mu:.9g} {model.w:.9g} {model.tau}"
    print(line)
    out = getattr(args, "out", None)
    if out:
        evt.save_gpd_models(out, model)
    return 0


def _add_common(p):
    p.add_argument("--config", help="key = value config file; flags override")
    p.add_argument("--seed", type=int, help="PRNG seed (default 0)")
    p.add_argument("--out", help="output path or prefix")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="owhsi",
        description="Open-world hyperspectral classification pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the multitask network and fit "
                                     "the tail models")
    _add_common(p)
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--split", help="existing split file (overrides --nos/--seed)")
    p.add_argument("--classes", type=int, help="known-class count C")
    p.add_argument("--nos", type=int, help="training samples per class")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--phase1-epochs", type=int, dest="phase1_epochs")
    p.add_argument("--phase2-epochs", type=int, dest="phase2_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--lambda-c", type=float, dest="lambda_c")
    p.add_argument("--lambda-r", type=float, dest="lambda_r")
    p.add_argument("--weights", help="weight-file output path")
    p.add_argument("--gpd", help="tail-model output path")
    p.add_argument("--report", help="train-report output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify pixels and emit rasters")
    _add_common(p)
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--weights")
    p.add_argument("--gpd")
    p.add_argument("--mode",
                   choices=["closed", "softmax", "mdl4ow", "mdl4ow-c"])
    p.add_argument("--z", type=float)
    p.add_argument("--all-pixels", action="store_true", dest="all_pixels")
    p.add_argument("--fit-on-predict", action="store_true",
                   dest="fit_on_predict",
                   help="fit tail models on prediction-time losses")
    p.add_argument("--nos", type=int,
                   help="samples per class (tail size for --fit-on-predict)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score an open-label raster")
    _add_common(p)
    p.add_argument("--pred")
    p.add_argument("--labels")
    p.add_argument("--classes", type=int)
    p.add_argument("--test-classes", type=int, dest="test_classes",
                   help="test-universe class count for openness")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-map", help="render a label raster to PPM")
    _add_common(p)
    p.add_argument("--pred")
    p.add_argument("--palette")
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_render_map)

    p = sub.add_parser("synth", help="generate a synthetic cube + labels")
    _add_common(p)
    p.add_argument("--spec")
    p.add_argument("--cube", help="cube output path")
    p.add_argument("--labels", help="labels output path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gpd-fit", help="fit a tail model to a loss file")
    _add_common(p)
    p.add_argument("--losses", help="text file, one loss per line")
    p.add_argument("--tau", type=int)
    p.add_argument("--nos", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--tail-mode", dest="tail_mode",
                   choices=["global", "classwise"])
    p.set_defaults(func=cmd_gpd_fit)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args = _merge_config(args)
        return args.func(args)
    except TrainingDivergedError as e:
        return _fail(str(e), code=3)
    except (OSError, ValueError, KeyError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
