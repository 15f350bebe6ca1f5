"""Command line front end: data synthesis, training, evaluation, inference.

One flat JSON file carries every tunable; flags override individual keys and
the effective merged config is written next to each training run so that later
commands can rebuild the exact network.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace

import numpy as np

from .adversarial import ControllerFault, loss_adv, loss_mse
from .data import (
    SyntheticSceneConfig,
    generate_dataset,
    load_dataset,
    load_image,
    pck,
    pckh,
    schema_for,
    write_dataset,
)
from .heatmap import FlipPairs, PersonDescriptor
from .network import NetworkConfig, build_discriminator, build_generator, load_checkpoint
from .tensor import (
    ContractViolation,
    RngStream,
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    grad_check,
    maxpool2d,
    mse_sum,
    relu,
    scale,
    tensor_sum,
    upsample_nearest2x,
)
from .training import (
    TrainConfig,
    TrainingFault,
    evaluate,
    infer,
    predictor_for,
    train_loop,
)

_NET_KEYS = tuple(f.name for f in fields(NetworkConfig))
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
# num_joints is shared with the network section on purpose
_SCENE_KEYS = tuple(f.name for f in fields(SyntheticSceneConfig))
_PAIR_KEYS = tuple(
    f.name for f in list(fields(TrainConfig)) + list(fields(SyntheticSceneConfig))
    if isinstance(f.default, tuple)
)


def _default_config() -> dict:
    flat = {
        **asdict(NetworkConfig()),
        **asdict(TrainConfig()),
        **asdict(SyntheticSceneConfig()),
        "seed": 0,
    }
    for key in _PAIR_KEYS:
        flat[key] = list(flat[key])
    return flat


def _read_config_file(path: str) -> dict:
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ContractViolation("config file must hold a JSON object")
    known = set(_default_config())
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ContractViolation(f"unknown config keys: {', '.join(unknown)}")
    return obj


def _merged_config(args) -> dict:
    flat = _default_config()
    if getattr(args, "config", None):
        flat.update(_read_config_file(args.config))
    for key in set(_NET_KEYS) | set(_TRAIN_KEYS) | set(_SCENE_KEYS) | {"seed"}:
        val = getattr(args, key, None)
        if val is not None:
            flat[key] = val
    return flat


def _split_config(flat: dict):
    def section(keys, cls):
        kwargs = {k: flat[k] for k in keys}
        for k in _PAIR_KEYS:
            if k in kwargs:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs)

    net = section(_NET_KEYS, NetworkConfig)
    train = section(_TRAIN_KEYS, TrainConfig)
    scene = section(_SCENE_KEYS, SyntheticSceneConfig)
    return net.validate(), train.validate(), scene.validate(), int(flat["seed"])


def _load_generator(checkpoint: str, config: str | None):
    cfg_path = config or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.json")
    flat = _default_config()
    flat.update(_read_config_file(cfg_path))
    net_cfg, _, _, _ = _split_config(flat)
    gen = build_generator(net_cfg, RngStream(0).child(1))
    load_checkpoint(gen, checkpoint)
    return gen, net_cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    flat = _merged_config(args)
    _, _, scene, seed = _split_config(flat)
    total = generate_dataset(scene, args.count + args.val_count, seed)
    train_part = total[: args.count]
    val_part = [(img, replace(rec, split="val")) for img, rec in total[args.count :]]
    write_dataset(train_part, os.path.join(args.out, "train"))
    if val_part:
        write_dataset(val_part, os.path.join(args.out, "val"))
    print(f"wrote {len(train_part)} train and {len(val_part)} val images under {args.out}")
    return 0


def cmd_train(args) -> int:
    flat = _merged_config(args)
    net_cfg, train_cfg, _, seed = _split_config(flat)
    samples = load_dataset(args.data)
    val_samples = load_dataset(args.val_data) if args.val_data else None
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(flat, fh, indent=2, sort_keys=True)
        fh.write("\n")
    clock = time.perf_counter if args.timing else None
    schema = schema_for(net_cfg.num_joints)
    result = train_loop(
        net_cfg, train_cfg, samples, args.out, seed,
        schema=schema, val_samples=val_samples, clock=clock,
    )
    last = result.reports[-1]
    print(f"finished {len(result.reports)} iterations; "
          f"l_mse {last.l_mse:.6g}, l_g {last.l_g:.6g}, k_t {result.state.k_t:.6g}")
    for epoch, res in result.evals:
        print(f"eval after epoch {epoch}: total {res.total:.4f}")
    if val_samples:
        final = evaluate(result.generator, net_cfg, val_samples, schema=schema)
        print("held-out detection rates at r=0.2:")
        sys.stdout.write(final.csv_row(schema))
    print(f"weights: {os.path.join(args.out, 'generator.bin')}")
    return 0


def cmd_eval(args) -> int:
    gen, net_cfg = _load_generator(args.checkpoint, args.config)
    samples = load_dataset(args.data)
    schema = schema_for(net_cfg.num_joints)
    predict = predictor_for(gen, net_cfg, schema)
    preds = [predict(img, rec.person) for img, rec in samples]
    records = [rec for _, rec in samples]
    use_head = args.metric == "pckh"
    r = args.r if args.r is not None else (0.5 if use_head else 0.2)
    metric = pckh if use_head else pck
    res = metric(preds, records, r=r, schema=schema)
    table = res.csv_row(schema)
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    return 0


def cmd_infer(args) -> int:
    gen, net_cfg = _load_generator(args.checkpoint, args.config)
    schema = schema_for(net_cfg.num_joints)
    image = load_image(args.image)
    h, w = image.shape[1], image.shape[2]
    center = tuple(args.center) if args.center else ((w - 1) / 2.0, (h - 1) / 2.0)
    scale_v = args.scale if args.scale else max(h, w) / 200.0
    person = PersonDescriptor(center, scale_v)
    kps, scores = infer(gen, net_cfg, image, person, FlipPairs(schema.flip_pairs))
    payload = {
        "names": list(schema.names),
        "joints": [
            [float(x), float(y), float(s)] for (x, y), s in zip(kps.xy, scores)
        ],
    }
    text = json.dumps(payload, indent=2) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0


def cmd_grad_check(args) -> int:
    results = gradient_audit(seed=args.seed, probes=args.probes)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:24s} {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"worst {worst:.3e} vs tolerance {args.tol:g} -> {'ok' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# gradient audit behind the grad-check subcommand


def gradient_audit(seed: int = 0, probes: int = 6) -> dict:
    """Finite-difference spot checks, from single ops up to the paired nets.

    Returns a mapping of check name to worst relative error. Every entry
    should sit well under 1e-3; anything larger points at a broken backward
    rule.
    """
    rng = RngStream(seed)
    out = {}

    x = Tensor(rng.normal((2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal((4, 3, 3, 3), std=0.3), requires_grad=True)
    b = Tensor(rng.normal((4,), std=0.1), requires_grad=True)
    tgt = Tensor(rng.normal((2, 4, 6, 6)))
    out["conv.input"] = grad_check(lambda t: mse_sum(conv2d(t, w, b, padding=1), tgt), x)
    out["conv.weight"] = grad_check(lambda t: mse_sum(conv2d(x, t, b, padding=1), tgt), w)
    out["conv.bias"] = grad_check(lambda t: mse_sum(conv2d(x, w, t, padding=1), tgt), b)

    xp = Tensor(rng.normal((2, 3, 8, 8)), requires_grad=True)
    out["maxpool.input"] = grad_check(lambda t: tensor_sum(maxpool2d(t)), xp)

    xr_data = rng.normal((2, 3, 5, 5))
    xr_data = np.where(np.abs(xr_data) < 0.05, 0.2, xr_data)
    out["relu.input"] = grad_check(lambda t: tensor_sum(relu(t)), Tensor(xr_data, requires_grad=True))

    xu = Tensor(rng.normal((1, 2, 4, 4)), requires_grad=True)
    tgt_u = Tensor(rng.normal((1, 2, 8, 8)))
    out["upsample.input"] = grad_check(lambda t: mse_sum(upsample_nearest2x(t), tgt_u), xu)

    gamma = Tensor(rng.uniform(0.5, 1.5, (3,)), requires_grad=True)
    beta = Tensor(rng.normal((3,), std=0.2), requires_grad=True)
    rm, rv = np.zeros(3), np.ones(3)
    tgt_bn = Tensor(rng.normal((2, 3, 4, 4)))
    xb = Tensor(rng.normal((2, 3, 4, 4)), requires_grad=True)

    def bn_loss(t):
        y, _, _ = batchnorm2d(t, gamma, beta, rm, rv, training=True)
        return mse_sum(y, tgt_bn)

    out["batchnorm.input"] = grad_check(bn_loss, xb)
    out["batchnorm.scale"] = grad_check(
        lambda t: mse_sum(batchnorm2d(xb, t, beta, rm, rv, True)[0], tgt_bn), gamma
    )

    # both networks under the full two-player objective
    cfg = NetworkConfig(
        num_stacks=1, num_joints=4, input_res=32, heatmap_res=8,
        base_channels=8, hourglass_depth=1, conditional=False,
    ).validate()
    master = RngStream(seed)
    gen = build_generator(cfg, master.child(1))
    disc = build_discriminator(cfg, master.child(2))
    images = rng.uniform(0.0, 1.0, (1, 3, 32, 32))
    targets = Tensor(rng.uniform(0.0, 0.5, (1, 4, 8, 8)))

    def two_player(img_t):
        preds = gen.forward(img_t, True)
        l_mse = loss_mse(preds, targets)
        recon_fake = disc.forward(preds[-1], True)[-1]
        l_fake = loss_adv(preds[-1], recon_fake)
        recon_real = disc.forward(targets, True)[-1]
        l_real = loss_adv(targets, recon_real)
        return add(add(l_mse, scale(l_fake, 0.01)), add(l_real, scale(l_fake, -0.3)))

    picks = rng  # sampled flat indices, deduplicated and ordered
    idx_img = sorted({int(i) for i in picks.integers(0, images.size, (probes,))})
    out["nets.input"] = grad_check(two_player, Tensor(images, requires_grad=True), indices=idx_img)

    const_img = Tensor(images)

    def via_param(owner, attr):
        def f(probe):
            old = getattr(owner, attr)
            setattr(owner, attr, probe)
            try:
                return two_player(const_img)
            finally:
                setattr(owner, attr, old)

        return f

    for label, owner, attr in (
        ("nets.gen_stem_weight", gen.conv1, "weight"),
        ("nets.gen_heat_bias", gen.heat_convs[0], "bias"),
        ("nets.gen_lin_scale", gen.lin_bns[0], "gamma"),
        ("nets.disc_stem_weight", disc.conv1, "weight"),
        ("nets.disc_heat_weight", disc.heat_convs[0], "weight"),
    ):
        param = getattr(owner, attr)
        idx = sorted({int(i) for i in picks.integers(0, param.data.size, (probes,))})
        out[label] = grad_check(via_param(owner, attr), param, indices=idx)
    return out


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advpose",
                                description="pose estimation with a reconstruction critic")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", "--n", dest="count", type=int, required=True)
    g.add_argument("--val-count", type=int, default=0)
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="flat JSON config; flags override its keys")
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--num-joints", dest="num_joints", type=int)
    g.add_argument("--occluders", dest="occluder_count", type=int, nargs=2,
                   metavar=("LO", "HI"))
    g.add_argument("--occluder-size", dest="occluder_size", type=float, nargs=2,
                   metavar=("LO", "HI"))
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="fit the pose network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--val-data")
    t.add_argument("--config", help="flat JSON config; flags override its keys")
    t.add_argument("--seed", type=int)
    t.add_argument("--timing", action="store_true",
                   help="record real wall times (log is no longer rerun-identical)")
    for key, typ in (
        ("epochs", int), ("batch_size", int), ("lr", float), ("sigma", float),
        ("lambda_g", float), ("lambda_k", float), ("gamma", float),
        ("flip_prob", float), ("max_rotation_deg", float),
        ("eval_every", int), ("patience", int), ("checkpoint_every", int),
        ("num_stacks", int), ("num_joints", int), ("input_res", int),
        ("heatmap_res", int), ("base_channels", int), ("hourglass_depth", int),
    ):
        t.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
    t.add_argument("--no-adversarial", dest="adversarial", action="store_const", const=False)
    t.add_argument("--freeze-critic", dest="update_d", action="store_const", const=False)
    t.add_argument("--unconditional", dest="conditional", action="store_const", const=False)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="defaults to config.json beside the checkpoint")
    e.add_argument("--r", type=float, default=None)
    e.add_argument("--metric", choices=["pck", "pckh"], default="pck",
                   help="pckh scores against the head size instead of the torso")
    e.add_argument("--out", help="also write the table to this CSV file")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="keypoints for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--config")
    i.add_argument("--center", type=float, nargs=2, metavar=("X", "Y"))
    i.add_argument("--scale", type=float)
    i.add_argument("--out")
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("grad-check", help="verify backward rules numerically")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--probes", type=int, default=6)
    c.add_argument("--tol", type=float, default=1e-3)
    c.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ContractViolation, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingFault, ControllerFault) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
