"""Batch command-line front end: ``physface <command> --config scene.yaml``.

Exit codes: 0 ok, 2 configuration error, 3 solver failure, 4 gradient check failure.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from . import __version__, actuation_model as am, canonical, contact, datagen, diffsim, geom, pd, scenes
from ._jit import USE_NUMBA

log = logging.getLogger("physface")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_GRADCHECK = 0, 2, 3, 4


class ConfigError(Exception):
    def __init__(self, message, field=None, line=None):
        parts = []
        if field is not None:
            parts.append(f"field '{field}'")
        if line is not None:
            parts.append(f"line {line}")
        super().__init__(f"{', '.join(parts)}: {message}" if parts else message)
        self.field, self.line = field, line


class FrameFailure(Exception):
    def __init__(self, frame, cause):
        super().__init__(f"solver failure at frame {frame}: {cause}")
        self.frame = frame


# ---------------------------------------------------------------------------
# config loading and validation


def _key_lines(node, prefix="", out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            name = f"{prefix}{k.value}"
            out[name] = k.start_mark.line + 1
            _key_lines(v, name + ".", out)
    return out


def read_config(path):
    """Parse a YAML config; returns the mapping and a ``dotted key -> line`` table."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=mark.line + 1 if mark else None) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    return data, _key_lines(node)


def _int(lo=None, hi=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValueError("expected an integer")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return check


def _float(lo=None, hi=None, lo_open=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError("expected a number")
        v = float(v)
        if not np.isfinite(v):
            raise ValueError("must be finite")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return check


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _str(v):
    if not isinstance(v, str) or not v:
        raise ValueError("expected a non-empty string")
    return v


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}")
        return v
    return check


def _optional(fn):
    def check(v):
        return None if v is None else fn(v)
    return check


def _vec3(v):
    if not isinstance(v, list) or len(v) != 3:
        raise ValueError("expected a list of 3 numbers")
    return [_float()(x) for x in v]


def _float_list(v):
    if not isinstance(v, list) or not v:
        raise ValueError("expected a non-empty list of numbers")
    return [_float()(x) for x in v]


def _frames(v):
    if v in ("all", "train", "test", "contact"):
        return v
    if isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in v):
        return v
    raise ValueError("expected 'all', 'train', 'test', 'contact' or a list of frame indices")


def _box(v):
    if not isinstance(v, list) or len(v) != 2:
        raise ValueError("expected [[xmin, ymin, zmin], [xmax, ymax, zmax]]")
    return [_vec3(v[0]), _vec3(v[1])]


def _contact_frames(v):
    if not isinstance(v, list):
        raise ValueError("expected a list of {identity, expr} entries")
    out = []
    for i, item in enumerate(v):
        if not isinstance(item, dict) or set(item) - {"identity", "expr"} or "expr" not in item:
            raise ValueError(f"entry {i}: expected keys identity (index) and expr (list)")
        out.append({"identity": _int(0)(item.get("identity", 0)), "expr": _float_list(item["expr"])})
    return out


COMMON = {
    "schema_version": (_int(), SCHEMA_VERSION),
    "seed": (_int(0), 0),
    "workers": (_int(1), 1),
    "out": (_str, "out"),
}

MODEL_SCHEMA = {
    "expr_width": (_int(1), 32),
    "style_width": (_int(1), 16),
    "mod_width": (_int(1), 32),
    "width": (_int(1), 64),
    "n_hidden": (_int(1), 2),
    "omega0": (_float(0, lo_open=True), 30.0),
    "jaw_width": (_int(1), 64),
}

STYLE_SCHEMA = {
    "mode": (_choice("own", "identity", "interpolate"), "own"),
    "identity": (_optional(_str), None),
    "other": (_optional(_str), None),
    "lambda": (_float(0.0, 1.0), 0.0),
}

SCENE_SCHEMA = {
    "dataset": (_str, "dataset"),
    "maps": (_str, "exact"),
    "model": (_str, "ground_truth"),
    "identity": (_optional(_str), None),
    "expression_identity": (_optional(_str), None),
    "frames": (_frames, "test"),
    "style": (STYLE_SCHEMA, {}),
    "contact": (_bool, False),
    "friction_mu": (_optional(_float(0.0)), None),
    "dhat": (_optional(_float(0.0, lo_open=True)), None),
    "paralysis": ({"region": (_optional(_box), None), "strength": (_float(0.0, 1.0), 1.0)}, {}),
    "bone_reshape": ({"scale": (_float(0.0, lo_open=True), 1.0), "offset": (_vec3, [0.0, 0.0, 0.0])}, {}),
    "tol": (_float(0.0, lo_open=True), datagen.GT_TOL),
}

SCHEMAS = {
    "gen-data": {
        "n_identities": (_int(1), 2),
        "n_frames": (_int(0), 40),
        "expr_dim": (_int(1), datagen.EXPR_DIM),
        "holdout": (_float(0.0, 1.0), 0.2),
        "contact_frames": (_contact_frames, []),
    },
    "train-map": {
        "dataset": (_str, "dataset"),
        "steps": (_int(1), 2000),
        "lr": (_float(0.0, lo_open=True), 1e-4),
        "lambda_e": (_float(0.0), canonical.ELASTIC_WEIGHT),
        "width": (_int(1), canonical.MAP_WIDTH),
    },
    "train-model": {
        "dataset": (_str, "dataset"),
        "maps": (_str, "exact"),
        "stage": (_choice(1, 2), 1),
        "init": (_optional(_str), None),
        "epochs": (_int(1), 400),
        "lr": (_float(0.0, lo_open=True), 1e-4),
        "decay_start": (_float(0.0, 1.0), None),
        "batch_size": (_int(1), 6),
        "contact": (_bool, False),
        "tol": (_float(0.0, lo_open=True), 1e-6),
        "lambda_act": (_float(0.0), am.LAMBDA_ACT),
        "lambda_lip": (_float(0.0), am.LAMBDA_LIP),
        "model": (MODEL_SCHEMA, {}),
    },
    "simulate": SCENE_SCHEMA,
    "retarget": SCENE_SCHEMA,
    "transfer-style": SCENE_SCHEMA,
    "gradcheck": {
        "scene": (_choice("two_element", "contact_pair"), "two_element"),
        "params": (_choice("actuation", "bones", "all"), "all"),
        "threshold": (_float(0.0, lo_open=True), 1e-4),
        "step": (_float(0.0, lo_open=True), 1e-5),
    },
    "bench": {
        "scenes": (lambda v: [_choice("squash", "contact_pair", "frame")(s) for s in v] if isinstance(v, list) else _choice()(v),
                   ["squash", "contact_pair", "frame"]),
        "repeats": (_int(1), 1),
    },
}


def _validate(data, schema, lines, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix.rstrip(".") or None, lines.get(prefix.rstrip(".")))
    out = {}
    for key in data:
        if key not in schema:
            raise ConfigError("unknown key", prefix + str(key), lines.get(prefix + str(key)))
    for key, (check, default) in schema.items():
        name = prefix + key
        if isinstance(check, dict):
            out[key] = _validate(data.get(key) or {}, check, lines, name + ".")
            continue
        if key not in data:
            out[key] = default
            continue
        try:
            out[key] = check(data[key])
        except ValueError as exc:
            raise ConfigError(str(exc), name, lines.get(name)) from None
    return out


def validate_config(command, data, lines=None):
    lines = lines or {}
    schema = dict(COMMON)
    schema.update(SCHEMAS[command])
    if "schema_version" in data and data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version (expected {SCHEMA_VERSION})", "schema_version", lines.get("schema_version"))
    return _validate(data, schema, lines)


def load_config(command, path=None, overrides=None):
    data, lines = read_config(path) if path else ({}, {})
    if path and "schema_version" not in data:
        raise ConfigError("missing schema version", "schema_version", 1)
    cfg = validate_config(command, data, lines)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    if command in ("simulate", "retarget", "transfer-style"):
        st = cfg["style"]
        if st["mode"] == "identity" and not st["identity"]:
            raise ConfigError("style mode 'identity' needs style.identity", "style.identity", lines.get("style.mode"))
        if st["mode"] == "interpolate" and not (st["identity"] and st["other"]):
            raise ConfigError("style mode 'interpolate' needs style.identity and style.other", "style", lines.get("style"))
    return cfg


# ---------------------------------------------------------------------------
# manifests


def file_hash(path):
    h = hashlib.sha256()
    if os.path.isdir(path):
        return datagen.bundle_hash(path)
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def write_manifest(out, command, cfg, config_path, inputs, outputs):
    rec = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_file": config_path,
        "config_hash": file_hash(config_path) if config_path else None,
        "inputs": {k: file_hash(v) for k, v in sorted(inputs.items()) if v and os.path.exists(v)},
        "outputs": {os.path.relpath(p, out): file_hash(p) for p in sorted(outputs)},
    }
    with open(os.path.join(out, datagen.RUN_MANIFEST), "w") as fh:
        json.dump(rec, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _all_files(root):
    found = []
    for d, _, files in sorted(os.walk(root)):
        found += [os.path.join(d, f) for f in sorted(files) if f != datagen.RUN_MANIFEST]
    return found


# ---------------------------------------------------------------------------
# shared loading


def load_warps(dataset, maps):
    if maps == "exact":
        return {ident.name: am.exact_warp(ident) for ident in dataset.identities}
    warps = {}
    for ident in dataset.identities:
        path = os.path.join(maps, f"{ident.name}.warp")
        if not os.path.exists(path):
            raise ConfigError(f"missing warp cache {path}", "maps")
        warps[ident.name] = canonical.read_warp_cache(path)
    return warps


def _load_dataset(path):
    try:
        return datagen.load_dataset(path)
    except (datagen.DatasetError, OSError) as exc:
        raise ConfigError(str(exc), "dataset") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, config_path=None):
    out = cfg["out"]
    ds = datagen.make_dataset(cfg["n_identities"], cfg["n_frames"], cfg["seed"], cfg["expr_dim"], cfg["holdout"], cfg["workers"])
    for k, item in enumerate(cfg["contact_frames"]):
        if item["identity"] >= len(ds.identities):
            raise ConfigError("contact frame identity index out of range", "contact_frames")
        ident = ds.identities[item["identity"]]
        expr = np.zeros(cfg["expr_dim"])
        expr[: len(item["expr"])] = item["expr"][: cfg["expr_dim"]]
        try:
            fr = datagen.make_ground_truth(ident, expr, with_contact=True, index=cfg["n_frames"] + k)
        except pd.SolverError as exc:
            raise FrameFailure(cfg["n_frames"] + k, exc) from None
        fr.split = "contact"
        ds.frames.append(fr)
    digest = datagen.export_dataset(ds, out)
    print(f"dataset written to {out} ({len(ds.identities)} identities, {len(ds.frames)} frames, hash {digest[:16]})")
    write_manifest(out, "gen-data", cfg, config_path, {}, _all_files(out))
    return EXIT_OK


def _train_one_map(args):
    seed, steps, lr, lam_e, width, out = args
    ident = datagen.cached_identity(seed)
    x, X = ident.correspondences()
    mapping, trace = canonical.train_mapping(x, X, ident.mesh, lam_e, steps, lr, seed=seed, width=width, tag=ident.name)
    mapping.save(os.path.join(out, f"{ident.name}.map"))
    canonical.write_warp_cache(os.path.join(out, f"{ident.name}.warp"), canonical.compute_warp_cache(mapping, ident.mesh))
    report = canonical.quality_report(mapping, ident.mesh, x, X)
    with open(os.path.join(out, f"{ident.name}_quality.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, f"{ident.name}_trace.csv"), "w") as fh:
        fh.write("\n".join(trace.lines()) + "\n")
    return ident.name, report


def cmd_train_map(cfg, config_path=None):
    ds = _load_dataset(cfg["dataset"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    jobs = [(ident.seed, cfg["steps"], cfg["lr"], cfg["lambda_e"], cfg["width"], out) for ident in ds.identities]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as ex:
            results = list(ex.map(_train_one_map, jobs))
    else:
        results = [_train_one_map(j) for j in jobs]
    for name, rep in results:
        print(f"{name}: vertex error mean {rep['vertex_error_mean']:.3e} max {rep['vertex_error_max']:.3e}, det J in [{rep['det_min']:.3f}, {rep['det_max']:.3f}]")
    outputs = _all_files(out)
    write_manifest(out, "train-map", cfg, config_path, {"dataset": cfg["dataset"]}, outputs)
    return EXIT_OK


def cmd_train_model(cfg, config_path=None):
    ds = _load_dataset(cfg["dataset"])
    warps = load_warps(ds, cfg["maps"])
    ctxs = am.contexts_from_dataset(ds, warps)
    if cfg["init"]:
        model = am.ActuationModel.load(cfg["init"])
    else:
        expr_dim = len(ds.frames[0].expr) if ds.frames else ds.config.get("expr_dim", datagen.EXPR_DIM)
        model = am.ActuationModel(am.ModelConfig(expr_dim=expr_dim, seed=cfg["seed"], **cfg["model"]), list(ctxs))
    for name in ctxs:
        model.register(name)

    def progress(epoch, trace):
        if trace.loss:
            log.info("epoch %d loss %.6e", epoch, trace.loss[-1])

    if cfg["stage"] == 1:
        decay = 0.5 if cfg["decay_start"] is None else cfg["decay_start"]
        trace = am.train_stage1(model, ds, ctxs, cfg["epochs"], cfg["lr"], cfg["batch_size"], decay,
                                lam_lip=cfg["lambda_lip"], seed=cfg["seed"], progress=progress)
    else:
        if not cfg["init"]:
            raise ConfigError("stage 2 needs a stage-1 checkpoint", "init")
        decay = 0.0 if cfg["decay_start"] is None else cfg["decay_start"]
        trace = am.train_stage2(model, ds, ctxs, cfg["epochs"], cfg["lr"], cfg["batch_size"], decay, cfg["contact"],
                                cfg["lambda_act"], cfg["lambda_lip"], cfg["tol"], cfg["seed"], progress=progress)
        if trace.skipped:
            print(f"stage 2: {trace.skipped} frame simulations skipped")
    out = cfg["out"]
    model.save(out)
    with open(os.path.join(out, "loss_trace.csv"), "w") as fh:
        fh.write("\n".join(trace.lines()) + "\n")
    print(f"model written to {out}; certified bound {model.certified_bound():.6g}, Lipschitz product {model.lipschitz_product():.6g}")
    outputs = _all_files(out)
    write_manifest(out, "train-model", cfg, config_path, {"dataset": cfg["dataset"], "init": cfg["init"]}, outputs)
    return EXIT_OK


def _select_frames(ds, ident_name, sel):
    seed = ds.identities[[i.name for i in ds.identities].index(ident_name)].seed
    frames = [f for f in ds.frames if f.identity == seed]
    if isinstance(sel, list):
        by_index = {f.index: f for f in frames}
        missing = [i for i in sel if i not in by_index]
        if missing:
            raise ConfigError(f"frame indices not in dataset: {missing}", "frames")
        return [by_index[i] for i in sel]
    if sel == "all":
        return frames
    return [f for f in frames if f.split == sel]


def _scene_job(args):
    """Simulate one frame; all inputs are paths or plain values so workers can rebuild state."""
    (cfg, target_name, frame_index, expr, style_vec, out, prev_u) = args
    ds = datagen.load_dataset(cfg["dataset"])
    ctx = am.contexts_from_dataset(ds, load_warps(ds, cfg["maps"]))[target_name]
    ident = ctx.identity
    kw = {}
    if cfg["dhat"] is not None:
        kw["dhat"] = cfg["dhat"]
    paralysis = None
    if cfg["paralysis"]["region"] is not None:
        lo, hi = np.array(cfg["paralysis"]["region"])
        c = ident.mesh.element_centers()
        paralysis = (np.all((c >= lo) & (c <= hi), axis=1), cfg["paralysis"]["strength"])
    reshape = None
    br = cfg["bone_reshape"]
    if br["scale"] != 1.0 or any(br["offset"]):
        rest = ident.bone_emb.rest_points.copy()
        jaw = ident.jaw_mask
        centroid = rest[jaw].mean(axis=0)
        rest[jaw] = centroid + br["scale"] * (rest[jaw] - centroid) + np.array(br["offset"])
        reshape = rest
    try:
        if cfg["model"] == "ground_truth":
            style = ident.style if style_vec is None else datagen.Style.from_dict(style_vec)
            A = ident.warped_actuation(expr, style)
            if paralysis is not None:
                A = am.paralysis_mask(A, *paralysis)
            T = datagen.canonical_jaw(expr, style)
            targets = ident.bone_targets(T) if reshape is None else pd.jaw_targets(reshape, ident.jaw_mask, ident.world_jaw(T))
            u0 = None
            if cfg["contact"] and cfg["friction_mu"] is not None:
                kw["friction"], u0 = _friction_from(ident, A, targets, cfg, kw, prev_u)
            state = datagen.simulate(ident, A, targets, cfg["contact"], u0=u0, tol=cfg["tol"], **kw)
            if not state.converged:
                raise pd.SolverError("did not converge")
            u = state.u
        else:
            model = am.ActuationModel.load(cfg["model"])
            style = ctx.name if style_vec is None else np.asarray(style_vec)
            if cfg["contact"] and cfg["friction_mu"] is not None:
                base = am.predict(model, ctx, expr, style, True, paralysis=paralysis, jaw_reshape=reshape, tol=cfg["tol"], **kw)
                kw["friction"], _ = _friction_from(ident, base.actuation, base.state.blocks.bones.targets, cfg, kw, prev_u)
            pred = am.predict(model, ctx, expr, style, cfg["contact"], u0=prev_u if cfg["friction_mu"] is not None else None,
                              paralysis=paralysis, jaw_reshape=reshape, tol=cfg["tol"], **kw)
            state, A, u = pred.state, pred.actuation, pred.u
    except (pd.SolverError, ValueError) as exc:
        raise FrameFailure(frame_index, exc) from None
    stem = os.path.join(out, f"frame_{frame_index:04d}")
    geom.write_obj(stem + ".obj", ident.surface(u), ident.surface_tris)
    with open(stem + "_actuation.csv", "w") as fh:
        fh.write("element_id,frob_dist\n")
        for e, v in enumerate(am.frobenius_scalar(A)):
            fh.write(f"{e},{v:.9g}\n")
    files = [stem + ".obj", stem + "_actuation.csv"]
    if state.contact is not None:
        with open(stem + "_contact.csv", "w") as fh:
            fh.write("\n".join(state.contact.audit_lines()) + "\n")
        files.append(stem + "_contact.csv")
    return files, u


def _friction_from(ident, A, targets, cfg, kw, prev_u):
    """Lagged friction: contacts and normal forces from the previous frame (or a frictionless solve)."""
    dkw = {k: v for k, v in kw.items() if k == "dhat"}
    if prev_u is None:
        st = datagen.simulate(ident, A, targets, True, tol=cfg["tol"], **dkw)
        prev_u = st.u
        info = st.contact
    else:
        blocks = ident.blocks.with_actuation(A)
        dhat = dkw.get("dhat", contact.default_dhat(ident.mesh.diameter()))
        info = contact.ContactInfo(dhat, contact.default_kappa(blocks, dhat), ident.lips)
        info.pairs = contact.collect_pairs(ident.lips, ident.lips.positions(prev_u), dhat)
    fset = contact.build_friction_set(info.pairs, ident.lips, prev_u, info.dhat, info.kappa, cfg["friction_mu"],
                                      diameter=ident.mesh.diameter())
    return fset, prev_u


def _scene_style(cfg, ds, model_path, target):
    st = cfg["style"]
    names = [i.name for i in ds.identities]
    for key in ("identity", "other"):
        if st[key] is not None and st[key] not in names:
            raise ConfigError(f"unknown identity {st[key]!r}", f"style.{key}")
    if st["mode"] == "own":
        return None
    if model_path == "ground_truth":
        if st["mode"] == "interpolate":
            a = ds.identity(int(st["identity"][2:])).style
            b = ds.identity(int(st["other"][2:])).style
            lam = st["lambda"]
            mix = {k: (np.asarray(getattr(a, k)) * (1 - lam) + np.asarray(getattr(b, k)) * lam) for k in ("gains", "tilts", "jaw_gain", "jaw_slide")}
            return {k: (v.tolist() if np.ndim(v) else float(v)) for k, v in mix.items()}
        return ds.identity(int(st["identity"][2:])).style.to_dict()
    model = am.ActuationModel.load(model_path)
    if st["mode"] == "interpolate":
        return model.interpolate_style(st["identity"], st["other"], st["lambda"]).tolist()
    return model.style_code(st["identity"]).tolist()


def cmd_simulate(cfg, config_path=None, command="simulate"):
    ds = _load_dataset(cfg["dataset"])
    names = [i.name for i in ds.identities]
    target = cfg["identity"] or names[0]
    if target not in names:
        raise ConfigError(f"unknown identity {target!r}", "identity")
    source = cfg["expression_identity"] or target
    if source not in names:
        raise ConfigError(f"unknown identity {source!r}", "expression_identity")
    if cfg["model"] != "ground_truth" and not os.path.exists(os.path.join(cfg["model"], am.CHECKPOINT_META)):
        raise ConfigError(f"model checkpoint not found: {cfg['model']}", "model")
    if cfg["maps"] != "exact":
        load_warps(ds, cfg["maps"])
    style_vec = _scene_style(cfg, ds, cfg["model"], target)
    frames = _select_frames(ds, source, cfg["frames"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    jobs = [(cfg, target, fr.index, fr.expr, style_vec, out, None) for fr in frames]
    outputs = []
    if cfg["friction_mu"] is not None and cfg["contact"]:
        # lagged friction couples consecutive frames, so run them in order
        prev = None
        for j in jobs:
            files, prev = _scene_job(j[:-1] + (prev,))
            outputs += files
    elif cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg["workers"]) as ex:
            for files, _ in ex.map(_scene_job, jobs):
                outputs += files
    else:
        for j in jobs:
            outputs += _scene_job(j)[0]
    print(f"{command}: {len(frames)} frame(s) of {source} on {target} written to {out}")
    inputs = {"dataset": cfg["dataset"]}
    if cfg["model"] != "ground_truth":
        inputs["model"] = cfg["model"]
    if cfg["maps"] != "exact":
        inputs["maps"] = cfg["maps"]
    write_manifest(out, command, cfg, config_path, inputs, outputs)
    return EXIT_OK


def cmd_retarget(cfg, config_path=None):
    return cmd_simulate(cfg, config_path, "retarget")


def cmd_transfer_style(cfg, config_path=None):
    if cfg["style"]["mode"] == "own" and cfg["style"]["identity"]:
        cfg["style"]["mode"] = "identity"
    return cmd_simulate(cfg, config_path, "transfer-style")


def cmd_gradcheck(cfg, config_path=None):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    rows = []
    if cfg["scene"] == "two_element":
        sc = scenes.two_element_scene()
        kw = {}
        vertex = sc.mesh.n_vertices - 1
    else:
        sc = scenes.contact_pair_scene()
        kw = {"proxy": sc.proxy, "dhat": sc.dhat}
        vertex = int(np.argmax(sc.mesh.vertices[:, 2] == sc.mesh.vertices[:, 2].max()))
    u0 = sc.mesh.vertices
    st0 = diffsim.solve_scene(sc.blocks, u0, **kw)
    target = st0.u[vertex] + np.array([0.05, -0.03, 0.02]) * sc.mesh.h
    loss = diffsim.point_loss(vertex, target)
    try:
        if cfg["params"] in ("actuation", "all"):
            rows += diffsim.gradcheck_actuation(sc.blocks, u0, loss, step=cfg["step"], **kw)
        if cfg["params"] in ("bones", "all"):
            pts = range(min(4, sc.blocks.bones.targets.shape[0]))
            rows += diffsim.gradcheck_bones(sc.blocks, u0, loss, pts, step=cfg["step"], **kw)
    except pd.SolverError as exc:
        raise FrameFailure(0, exc) from None
    path = os.path.join(out, "gradcheck.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(diffsim.format_report(rows)) + "\n")
    worst = max(r[3] for r in rows)
    print(f"gradcheck {cfg['scene']}: {len(rows)} parameters, max rel_err {worst:.3e} (threshold {cfg['threshold']:g})")
    write_manifest(out, "gradcheck", cfg, config_path, {}, [path])
    return EXIT_OK if worst < cfg["threshold"] else EXIT_GRADCHECK


def cmd_bench(cfg, config_path=None):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    rows = ["scene,backend,seconds,sweeps,cg_solves,cg_iterations,mean_pairs"]
    backend = "numba" if USE_NUMBA else "numpy"
    for name in cfg["scenes"]:
        for _ in range(cfg["repeats"]):
            contact.STATS.update(cg_solves=0, cg_iterations=0)
            t = time.perf_counter()
            if name == "squash":
                sc = scenes.squash_scene()
                st = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, sc.proxy, tol=1e-6, max_iters=5000)
            elif name == "contact_pair":
                sc = scenes.contact_pair_scene()
                st = contact.solve_quasistatic_contact(sc.mesh.vertices, sc.blocks, sc.proxy, dhat=sc.dhat, tol=1e-8, max_iters=5000)
            else:
                ident = datagen.cached_identity(1)
                e = np.zeros(datagen.EXPR_DIM)
                e[7] = 4.0  # lip press: brings the lips into contact
                st = datagen.simulate(ident, ident.warped_actuation(e), ident.bone_targets(datagen.canonical_jaw(e)), True)
            dt = time.perf_counter() - t
            pairs = [int(line.split(",")[2]) for line in st.contact.audit] if st.contact else [0]
            rows.append(f"{name},{backend},{dt:.4f},{st.iterations},{contact.STATS['cg_solves']},{contact.STATS['cg_iterations']},{np.mean(pairs):.2f}")
    path = os.path.join(out, "bench.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print("\n".join(rows))
    write_manifest(out, "bench", cfg, config_path, {}, [path])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-map": cmd_train_map,
    "train-model": cmd_train_model,
    "simulate": cmd_simulate,
    "retarget": cmd_retarget,
    "transfer-style": cmd_transfer_style,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def build_parser():
    p = argparse.ArgumentParser(prog="physface", description="Differentiable quasistatic face-actuation toolkit.")
    p.add_argument("--version", action="version", version=f"physface {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML scene/training config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out")
        sp.add_argument("--contact", choices=("on", "off"))
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train-model":
            sp.add_argument("--stage", type=int, choices=(1, 2))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "workers": args.workers, "out": args.out}
    if args.contact is not None:
        if "contact" not in SCHEMAS[args.command]:
            print(f"config error: --contact does not apply to {args.command}", file=sys.stderr)
            return EXIT_CONFIG
        overrides["contact"] = args.contact == "on"
    if getattr(args, "stage", None) is not None:
        overrides["stage"] = args.stage
    try:
        if args.workers is not None and args.workers < 1:
            raise ConfigError("must be >= 1", "workers")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("must be >= 0", "seed")
        cfg = load_config(args.command, args.config, overrides)
        return COMMANDS[args.command](cfg, args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FrameFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_SOLVER
    except pd.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
