"""Command line: one binary with a subcommand per pipeline step.

Every knob is a flag and may also come from ``--config file.{json,toml}``;
flags given on the command line win over the file. The effective settings
are written to ``run_config.json`` in the output location. Exit codes are
0 on success, 1 on a runtime failure and 2 on bad configuration or input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

log = logging.getLogger("splatstyle")


class UsageError(Exception):
    """Bad flags, config keys or input files; maps to exit code 2."""


# ---------------------------------------------------------------------------
# argument plumbing

# per-command defaults; a key missing here is not a valid setting
DEFAULTS: dict[str, dict[str, Any]] = {
    "make-toy": {"out": None, "seed": 0, "views": 5, "size": 64, "n_styles": 6, "n_contents": 10,
                 "encoder_seed": 0},
    "pretrain-decoder": {"content_dir": None, "style_dir": None, "encoder_weights": None, "out": None,
                         "iters": 500, "size": 32, "mode": "fullres", "seed": 0, "lr": 1e-4,
                         "style_weight": 1.0, "checkpoint_every": 0},
    "pretrain-geometry": {"scene": None, "out": None, "iters": 2000, "init": "points", "n_random": 500,
                          "sh_degree": 3, "seed": 0, "lambda_ssim": 0.2, "checkpoint_every": 0},
    "train-style": {"scene": None, "gaussians": None, "encoder_weights": None, "decoder_weights": None,
                    "styles_dir": None, "out": None, "iters": 3000, "feature_dim": 32, "lambda1": 1.0,
                    "lambda2": 1.0, "seed": 0, "lr_features": 2.5e-3, "lr_mlp": 2.5e-3,
                    "align_source": "photo", "checkpoint_every": 0},
    "stylize": {"gaussians": None, "mlp_weights": None, "encoder_weights": None, "decoder_weights": None,
                "style": None, "scene": None, "views": "all", "out": None, "renormalize": False},
    "render": {"gaussians": None, "scene": None, "views": "all", "out": None},
    "eval-consistency": {"gaussians": None, "mlp_weights": None, "encoder_weights": None,
                         "decoder_weights": None, "style": None, "scene": None, "views": None,
                         "out": None, "variant": "both"},
}
REQUIRED = {
    "make-toy": ["out"],
    "pretrain-decoder": ["content_dir", "style_dir", "encoder_weights", "out"],
    "pretrain-geometry": ["scene", "out"],
    "train-style": ["scene", "gaussians", "encoder_weights", "decoder_weights", "styles_dir", "out"],
    "stylize": ["gaussians", "mlp_weights", "encoder_weights", "decoder_weights", "style", "scene", "out"],
    "render": ["gaussians", "scene", "out"],
    "eval-consistency": ["gaussians", "mlp_weights", "encoder_weights", "decoder_weights", "style",
                         "scene", "views", "out"],
}
CHOICES = {"mode": ("fullres", "pooled"), "init": ("points", "random"),
           "align_source": ("photo", "render"), "variant": ("integrated", "view-specific", "both")}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatstyle", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON or TOML file with settings for the subcommand")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for cmd, defaults in DEFAULTS.items():
        sp = sub.add_parser(cmd)
        for key, default in defaults.items():
            if isinstance(default, bool):
                sp.add_argument(_flag(key), action="store_true", default=None)
            elif key == "style" and cmd == "eval-consistency" or key == "views" and cmd == "eval-consistency":
                sp.add_argument(_flag(key), action="append", default=None)
            else:
                typ = type(default) if default is not None and not isinstance(default, str) else str
                sp.add_argument(_flag(key), type=typ, default=None, choices=CHOICES.get(key))
    return p


def _read_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--config: no such file {path}")
    text = p.read_text()
    try:
        if p.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise UsageError(f"--config: cannot parse {path}: {exc}") from exc


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        doc = _read_config(args.config)
        doc = doc.get(cmd, doc) if isinstance(doc.get(cmd), dict) else doc
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {', '.join(unknown)}")
        for k, v in doc.items():
            if k in CHOICES and v not in CHOICES[k]:
                raise UsageError(f"config key {k!r} must be one of {CHOICES[k]}")
            cfg[k] = v
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    missing = [_flag(k) for k in REQUIRED[cmd] if cfg.get(k) in (None, [], "")]
    if missing:
        raise UsageError(f"{cmd}: missing required {', '.join(missing)}")
    return cfg


def _existing(path, flag: str, kind: str = "path") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.exists()
    if not ok:
        raise UsageError(f"{_flag(flag)}: no such {kind} {path}")
    return p


def _weights_file(path, flag: str) -> Path:
    from .sceneio import _weight_paths

    manifest, _ = _weight_paths(path)
    if not manifest.is_file():
        raise UsageError(f"{_flag(flag)}: no weight manifest at {manifest}")
    return manifest


def _echo(out_dir: Path, cmd: str, cfg: dict) -> None:
    from .sceneio import atomic_write_json

    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out_dir / "run_config.json", {"command": cmd, **cfg})


def parse_views(text: str, n: int) -> list[int]:
    if text in (None, "all"):
        return list(range(n))
    try:
        idx = [int(s) for s in str(text).split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"--views: expected 'all' or comma-separated indices, got {text!r}") from exc
    bad = [i for i in idx if not 0 <= i < n]
    if not idx or bad:
        raise UsageError(f"--views: indices must lie in [0, {n}), got {text!r}")
    return idx


def parse_pair(text: str, n: int) -> tuple[int, int]:
    parts = str(text).split(",")
    try:
        pair = tuple(int(s) for s in parts)
    except ValueError:
        pair = ()
    if len(pair) != 2 or not all(0 <= i < n for i in pair):
        raise UsageError(f"--views: expected a pair 'a,b' of view indices below {n}, got {text!r}")
    return pair  # type: ignore[return-value]


def _images_in(directory: Path, flag: str) -> list[np.ndarray]:
    from .sceneio import load_image

    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise UsageError(f"{_flag(flag)}: no PNG images in {directory}")
    return [load_image(f) for f in files]


def _load_scene(path, flag="scene"):
    from .sceneio import load_scene

    return load_scene(_existing(path, flag, "dir"))


def _arch_of(weights) -> "EncoderArch":
    from .stylizer import VGG19_RELU4, EncoderArch

    arch = weights.meta.get("arch")
    return EncoderArch.from_dict(arch) if arch else VGG19_RELU4


def _style_model(cfg: dict):
    from .sceneio import load_weights
    from .stylizer import StyleModel, decoder_schema, encoder_schema

    enc = load_weights(_weights_file(cfg["encoder_weights"], "encoder_weights"))
    arch = _arch_of(enc)
    enc = load_weights(_weights_file(cfg["encoder_weights"], "encoder_weights"), encoder_schema(arch))
    dec = load_weights(_weights_file(cfg["decoder_weights"], "decoder_weights"), decoder_schema(arch))
    mlp = load_weights(_weights_file(cfg["mlp_weights"], "mlp_weights"))
    return StyleModel(arch, enc.params, dec.params, mlp.params, dec.meta.get("mode", "fullres"))


# ---------------------------------------------------------------------------
# commands


def cmd_make_toy(cfg: dict) -> None:
    """Write a procedural scene, style/content folders and a random tiny encoder."""
    from .sceneio import save_image, save_scene, save_weights
    from .stylizer import TINY, init_encoder
    from .toy import content_image, style_image, toy_scene

    out = Path(cfg["out"])
    ds, _ = toy_scene(cfg["seed"], n_views=cfg["views"], size=cfg["size"])
    save_scene(ds, out / "scene")
    for i in range(cfg["n_styles"]):
        save_image(style_image(cfg["seed"] * 1000 + i, cfg["size"]), out / "styles" / f"style_{i:02d}.png")
    for i in range(cfg["n_contents"]):
        save_image(content_image(cfg["seed"] * 1000 + i, cfg["size"]), out / "contents" / f"content_{i:02d}.png")
    enc = init_encoder(TINY, np.random.default_rng(cfg["encoder_seed"]))
    save_weights(out / "encoder", enc, {"arch": TINY.to_dict(), "kind": "encoder"})
    _echo(out, "make-toy", cfg)


def cmd_pretrain_decoder(cfg: dict) -> None:
    from .sceneio import load_weights, save_weights
    from .stylizer import encoder_schema, init_decoder
    from .training import TrainConfig, pretrain_decoder

    contents = _images_in(_existing(cfg["content_dir"], "content_dir", "dir"), "content_dir")
    styles = _images_in(_existing(cfg["style_dir"], "style_dir", "dir"), "style_dir")
    enc = load_weights(_weights_file(cfg["encoder_weights"], "encoder_weights"))
    arch = _arch_of(enc)
    enc = load_weights(_weights_file(cfg["encoder_weights"], "encoder_weights"), encoder_schema(arch))
    out = Path(cfg["out"])
    _echo(out, "pretrain-decoder", cfg)
    rng = np.random.default_rng(cfg["seed"])
    config = TrainConfig("decoder", cfg["iters"], seed=cfg["seed"], lr={"decoder": cfg["lr"]},
                         crop=cfg["size"], mode=cfg["mode"], style_weight_2d=cfg["style_weight"],
                         checkpoint_every=cfg["checkpoint_every"], out_dir=str(out))
    params, _ = pretrain_decoder(config, contents, styles, enc.params, arch, init_decoder(arch, rng))
    save_weights(out / "decoder", params, {"arch": arch.to_dict(), "mode": cfg["mode"], "kind": "decoder"})


def _random_init(ds, n: int, rng: np.random.Generator, sh_degree: int):
    from .gaussians import from_points

    # the point nearest to all optical axes, in the least-squares sense
    a, b = np.zeros((3, 3)), np.zeros(3)
    for cam in ds.cameras:
        d = -cam.camera_to_world[:3, 2]
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ cam.center
    focus = np.linalg.lstsq(a, b, rcond=None)[0]
    half = ds.scene_scale()
    xyz = focus + rng.uniform(-half, half, (n, 3))
    return from_points(xyz, np.full((n, 3), 0.5), sh_degree=sh_degree)


def cmd_pretrain_geometry(cfg: dict) -> None:
    from .gaussians import from_points
    from .sceneio import save_gaussians
    from .training import TrainConfig, pretrain_geometry

    ds = _load_scene(cfg["scene"])
    if len(ds) == 0:
        raise UsageError("--scene: the scene has no views")
    rng = np.random.default_rng(cfg["seed"])
    if cfg["init"] == "points":
        if ds.points is None:
            raise UsageError("--init points needs points.ply in the scene; use --init random")
        init = from_points(*ds.points, sh_degree=cfg["sh_degree"])
    else:
        init = _random_init(ds, cfg["n_random"], rng, cfg["sh_degree"])
    out = Path(cfg["out"])
    _echo(out, "pretrain-geometry", cfg)
    config = TrainConfig("geometry", cfg["iters"], seed=cfg["seed"], lambda_ssim=cfg["lambda_ssim"],
                         spatial_scale=ds.scene_scale(), checkpoint_every=cfg["checkpoint_every"],
                         out_dir=str(out))
    g, records = pretrain_geometry(config, ds, init)
    save_gaussians(g, out / "gaussians.ply")
    tail = records[-min(len(records), 50):]
    log.info("mean training PSNR over the last %d iterations: %.2f dB",
             len(tail), float(np.mean([r["psnr"] for r in tail])))


def cmd_train_style(cfg: dict) -> None:
    from .sceneio import load_gaussians, load_weights, save_gaussians, save_weights
    from .stylizer import decoder_schema, encoder_schema
    from .training import TrainConfig, train_style

    ds = _load_scene(cfg["scene"])
    g = load_gaussians(_existing(cfg["gaussians"], "gaussians"))
    enc = load_weights(_weights_file(cfg["encoder_weights"], "encoder_weights"))
    arch = _arch_of(enc)
    enc = load_weights(_weights_file(cfg["encoder_weights"], "encoder_weights"), encoder_schema(arch))
    dec = load_weights(_weights_file(cfg["decoder_weights"], "decoder_weights"), decoder_schema(arch))
    styles = _images_in(_existing(cfg["styles_dir"], "styles_dir", "dir"), "styles_dir")
    out = Path(cfg["out"])
    _echo(out, "train-style", cfg)
    config = TrainConfig("style", cfg["iters"], seed=cfg["seed"],
                         lr={"features": cfg["lr_features"], "mlp": cfg["lr_mlp"]},
                         lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], mode=dec.meta.get("mode", "fullres"),
                         align_source=cfg["align_source"], checkpoint_every=cfg["checkpoint_every"],
                         out_dir=str(out))
    res = train_style(config, ds, g, enc.params, dec.params, arch, styles, feature_dim=cfg["feature_dim"])
    save_gaussians(res.gaussians, out / "gaussians.ply")
    save_weights(out / "mlp", res.mlp, {"kind": "mlp", "feature_dim": cfg["feature_dim"],
                                        "out_dim": arch.out_channels})


def cmd_stylize(cfg: dict) -> None:
    """Restyle views with an arbitrary style image; nothing is optimized here."""
    from .rasterizer import rasterize
    from .sceneio import load_gaussians, load_image, save_image
    from .stylizer import stylize_feature_map

    ds = _load_scene(cfg["scene"])
    g = load_gaussians(_existing(cfg["gaussians"], "gaussians"))
    if not g.features_present:
        raise UsageError("--gaussians: the PLY carries no features; run train-style first")
    model = _style_model(cfg)
    style = load_image(_existing(cfg["style"], "style"))
    views = parse_views(cfg["views"], len(ds))
    out = Path(cfg["out"])
    _echo(out, "stylize", cfg)
    code = model.style_code(style)
    for v in views:
        feat = rasterize(g, ds.cameras[v]).feature
        _, img = stylize_feature_map(feat, model, code, renormalize=bool(cfg["renormalize"]))
        save_image(img, out / f"view_{v:03d}.png")


def cmd_render(cfg: dict) -> None:
    from .rasterizer import rasterize
    from .sceneio import load_gaussians, save_image

    ds = _load_scene(cfg["scene"])
    g = load_gaussians(_existing(cfg["gaussians"], "gaussians"))
    if len(g) == 0:
        log.warning("%s holds no Gaussians; writing black frames", cfg["gaussians"])
    views = parse_views(cfg["views"], len(ds))
    out = Path(cfg["out"])
    _echo(out, "render", cfg)
    for v in views:
        save_image(rasterize(g, ds.cameras[v]).color, out / f"view_{v:03d}.png")


def cmd_eval_consistency(cfg: dict) -> None:
    from .consistency import VARIANTS, ablation_compare
    from .sceneio import atomic_write_json, load_gaussians, load_image

    ds = _load_scene(cfg["scene"])
    pairs = [parse_pair(s, len(ds)) for s in cfg["views"]]
    g = load_gaussians(_existing(cfg["gaussians"], "gaussians"))
    if not g.features_present:
        raise UsageError("--gaussians: the PLY carries no features; run train-style first")
    model = _style_model(cfg)
    style_paths = cfg["style"] if isinstance(cfg["style"], list) else [cfg["style"]]
    styles = {Path(p).stem: load_image(_existing(p, "style")) for p in style_paths}
    variants = VARIANTS if cfg["variant"] == "both" else (cfg["variant"],)
    out = Path(cfg["out"])
    report = ablation_compare(g, ds.cameras, styles, model, pairs, scene_scale=ds.scene_scale(),
                              variants=variants)
    if not report["entries"]:
        log.warning("no matched pixels for the requested view pairs")
    _echo(out.parent, "eval-consistency", cfg)
    atomic_write_json(out, report)
    for v, r in report["summary"]["mean_rmse_rgb"].items():
        log.info("%s: mean RGB consistency RMSE %.5f", v, r)


COMMANDS: dict[str, Callable[[dict], None]] = {
    "make-toy": cmd_make_toy,
    "pretrain-decoder": cmd_pretrain_decoder,
    "pretrain-geometry": cmd_pretrain_geometry,
    "train-style": cmd_train_style,
    "stylize": cmd_stylize,
    "render": cmd_render,
    "eval-consistency": cmd_eval_consistency,
}


def main(argv: list[str] | None = None) -> int:
    from .sceneio import PlyFormatError, SceneValidationError, WeightValidationError
    from .training import ConfigError

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        cfg = resolve(args)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](cfg)
    except (UsageError, ConfigError, SceneValidationError, WeightValidationError, PlyFormatError,
            FileNotFoundError) as exc:
        print(f"splatstyle: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"splatstyle: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
