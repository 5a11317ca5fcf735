"""Command-line client.

Every subcommand except ``serve`` sends one request to the service: a running
server when ``--server URL`` is given, otherwise an in-process app.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import httpx

from .config import ConfigError, parse_kv_text

TIMEOUT = httpx.Timeout(10.0, read=None)


class ClientError(RuntimeError):
    pass


def _client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=TIMEOUT)
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Using `httpx` with")
        from fastapi.testclient import TestClient

    from .api import app

    return TestClient(app, raise_server_exceptions=True)


def _call(server: str | None, method: str, path: str, **kwargs) -> dict:
    with _client(server) as client:
        resp = client.request(method, path, **kwargs)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail")
        except ValueError:
            detail = resp.text
        if isinstance(detail, list):  # request validation errors
            detail = "; ".join(f"{'.'.join(map(str, d.get('loc', ())))}: {d.get('msg')}" for d in detail)
        raise ClientError(str(detail))
    return resp.json()


def _overrides(extra: list[str]) -> dict[str, str]:
    """``--section.key value`` / ``--section.key=value`` pairs left over by argparse."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {arg!r}")
        key, sep, value = arg[2:].partition("=")
        if not sep:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def _config_kv(path: str | None, args: argparse.Namespace, extra: dict[str, str]) -> dict[str, str]:
    kv = parse_kv_text(Path(path).read_text(encoding="utf-8")) if path else {}
    kv.update(extra)
    for flag, key in (("strategy", "strategy"), ("seed", "seed"), ("epochs", "train.epochs"),
                      ("beam", "eval.beam"), ("max_len", "eval.max_len"), ("out", "train.checkpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            kv[key] = str(value)
    if getattr(args, "greedy", False):
        kv["eval.greedy"] = "true"
    return kv


def _decode_opts(args, kv: dict[str, str]) -> dict:
    def pick(flag, key, default, conv):
        value = getattr(args, flag, None)
        return value if value is not None else conv(kv.get(key, default))

    return {
        "beam": pick("beam", "eval.beam", 5, int),
        "greedy": bool(args.greedy) or kv.get("eval.greedy", "false").lower() in ("1", "true", "yes", "on"),
        "max_len": pick("max_len", "eval.max_len", 20, int),
        "length_penalty": float(kv.get("eval.length_penalty", 1.0)),
    }


def cmd_synth(args, extra) -> None:
    params = {k.split(".", 1)[1]: v for k, v in extra.items() if k.startswith("synth.")}
    if set(extra) - {f"synth.{k}" for k in params}:
        raise ConfigError(f"synth only accepts synth.* overrides, got {sorted(extra)}")
    if args.seed is not None:
        params["seed"] = str(args.seed)
    body = _call(args.server, "POST", "/synth", json={"out": args.out, "params": params,
                                                      "split": args.split, "split_seed": args.split_seed})
    for f in body["files"]:
        print(f)
    print(f"{body['contexts']} contexts, {body['pairs']} pairs", file=sys.stderr)


def cmd_train(args, extra) -> None:
    kv = _config_kv(args.config, args, extra)
    body = _call(args.server, "POST", "/train", json={"config": kv})
    last = body["epochs"][-1]
    print(f"checkpoint {body['checkpoint']}")
    print(f"log {body['log']}")
    print(f"final epoch {last['epoch']} train_nll {last['train_nll']:.4f} replaced {last['replaced_fraction']:.4f}")


def cmd_evaluate(args, extra) -> None:
    kv = _config_kv(args.config, argparse.Namespace(), extra)
    test = args.test or kv.get("data.test")
    if not test:
        raise ConfigError("evaluate needs --test or data.test in the config")
    body = _call(args.server, "POST", "/evaluate",
                 json={"checkpoint": args.checkpoint, "test": test, **_decode_opts(args, kv)})
    if args.out:
        Path(args.out).write_text(body["text"], encoding="utf-8")
    sys.stdout.write(body["text"])


def cmd_decode(args, extra) -> None:
    kv = _config_kv(args.config, argparse.Namespace(), extra)
    body = _call(args.server, "POST", "/decode", json={
        "checkpoint": args.checkpoint, "contexts": args.contexts, "out": args.out, **_decode_opts(args, kv)})
    print(f"{body['lines']} responses written to {body['out']}", file=sys.stderr)


def cmd_compare(args, extra) -> None:
    paths = args.config or [None]
    strategies = args.strategies.split(",") if args.strategies else [None]
    if len(paths) > 1 and strategies != [None]:
        raise ConfigError("give either several --config files or --strategies, not both")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else []
    seed = args.seed if args.seed is not None or not seeds else seeds[0]
    configs = []
    for path in paths:
        for strategy in strategies:
            ns = argparse.Namespace(strategy=strategy, seed=seed, epochs=args.epochs, beam=args.beam,
                                    max_len=args.max_len, greedy=args.greedy)
            configs.append(_config_kv(path, ns, extra))
    body = _call(args.server, "POST", "/compare", json={"configs": configs, "seeds": seeds, "out_dir": args.out_dir})
    if args.out:
        Path(args.out).write_text(body["table"], encoding="utf-8")
    sys.stdout.write(body["table"])


def cmd_serve(args, extra) -> None:
    if extra:
        raise ConfigError(f"unrecognized arguments {extra}")
    import uvicorn

    uvicorn.run("bridgelab.api:app", host=args.host, port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgelab", description=__doc__.splitlines()[0])
    parser.add_argument("--server", help="base URL of a running service (default: in-process)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def decode_flags(p):
        p.add_argument("--beam", type=int, help="beam width (default from config, else 5)")
        p.add_argument("--greedy", action="store_true", help="greedy decoding instead of beam search")
        p.add_argument("--max-len", dest="max_len", type=int, help="maximum response length")

    p = sub.add_parser("synth", help="write a synthetic one-to-many corpus")
    p.add_argument("--out", required=True, help="corpus file (with --split: stem for .train/.valid/.test files)")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", action="store_true", help="write train/valid/test files")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--strategy", choices=("teacher", "scheduled", "adapbridge"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute the metric report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", help="test corpus (default: data.test from --config)")
    p.add_argument("--config")
    p.add_argument("--out", help="also write the report here")
    decode_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("decode", help="generate one response per context line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--contexts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("compare", help="train and evaluate several strategies on one corpus")
    p.add_argument("--config", action="append", help="config file; repeat for several runs")
    p.add_argument("--strategies", help="comma-separated strategies applied to a single config")
    p.add_argument("--strategy", dest="strategies", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="also write the table here")
    p.add_argument("--out-dir", dest="out_dir", help="directory for per-run checkpoints and logs")
    decode_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, _overrides(rest))
    except (ClientError, ConfigError, OSError, httpx.HTTPError) as exc:
        print(f"bridgelab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything escaping the in-process app
        print(f"bridgelab {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
