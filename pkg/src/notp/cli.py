"""Command-line interface.

Settings resolve as flags > environment (``NOTP_KEYFILE``, ``NOTP_LISTEN``,
``NOTP_SEED``) > ``--config`` file (``key=value`` lines) > defaults, and the
effective configuration is echoed to stderr.  Key bits are never printed.

Exit codes: 0 success, 1 other failure, 2 usage, 10 handshake, 11 timeout,
12 rekey needed before the requested schedule finished, 13 key starvation,
14 integrity (key file, spend sidecar, transcript, digest or MAC failure).
"""

from __future__ import annotations

import argparse
import hashlib
import hmac
import json
import math
import os
import socket
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, attacks
from .entropy import EntropyStream, SeededEntropy, SystemEntropy
from .keys import KeyBuffer, KeyFileError, KeyStarvation, pack_bits, read_key_file, write_key_file
from .net import (DEFAULT_DEADLINE, Capture, Channel, DigestMismatch, ErrorCode, FramingError,
                  HandshakeError, NetError, PeerError, Server, TransportTimeout, connect,
                  run_initiator, run_responder)
from .physics import NoiseParams
from .protocol import (ConditionError, KeyTooShort, ProtocolError, RekeyNeeded, Role, hmac_tag,
                       init_session, xor_with_key)
from .shuffle import ShuffleConfig
from .transcript import TranscriptError, match_truth, read_transcript, read_truth, truth_document, write_truth

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_HANDSHAKE = 10
EXIT_TIMEOUT = 11
EXIT_REKEY = 12
EXIT_STARVATION = 13
EXIT_INTEGRITY = 14

MAC_KEY_BITS = 256
LIST_SEED_TAG = b"notp-list-seed\x00"
DEFAULT_LISTEN = "127.0.0.1:7878"


class UsageError(Exception):
    pass


class IntegrityError(Exception):
    pass


class ScheduleCut(Exception):
    """Budget ran out before the requested number of cycles."""


# name -> (default, type, environment variable)
SETTINGS = {
    "n_mean": (100.0, float, None),
    "dphi_exp": (11, int, None),
    "dphi": (None, float, None),
    "adc_bits": (16, int, None),
    "guard": (5.0, float, None),
    "nb": (32, int, None),
    "list_seed": (None, str, None),
    "batch": (256, int, None),
    "cycles": (0, int, None),
    "listen": (DEFAULT_LISTEN, str, "NOTP_LISTEN"),
    "peer": (None, str, None),
    "key": ([], str, "NOTP_KEYFILE"),
    "seed": (None, int, "NOTP_SEED"),
    "deadline": (DEFAULT_DEADLINE, float, None),
    "out": (None, str, None),
    "capture": (None, str, None),
    "capture_truth": (None, str, None),
}


@dataclass
class Config:
    values: dict = field(default_factory=dict)
    live: bool = False
    unsafe: bool = False

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def params(self) -> NoiseParams:
        dphi = self.dphi if self.dphi is not None else 2.0 ** -self.dphi_exp
        return NoiseParams(self.n_mean, dphi, self.adc_bits, self.guard)

    def entropy(self) -> EntropyStream:
        return SystemEntropy() if self.seed is None else SeededEntropy(self.seed)

    def echo(self, command: str) -> None:
        shown = []
        for name in SETTINGS:
            v = self.values.get(name)
            if v is None or v == []:
                continue
            shown.append(f"{name}={','.join(v) if isinstance(v, list) else v}")
        shown.append(f"entropy={'live' if self.seed is None else 'seeded'}")
        if self.unsafe:
            shown.append("unsafe=true")
        print(f"notp {command}: " + " ".join(shown), file=sys.stderr)


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        name = k.replace("-", "_")
        if name not in SETTINGS:
            raise UsageError(f"{path}:{lineno}: unknown setting {k!r}")
        out[name] = v
    return out


def _convert(name: str, raw):
    default, typ, _ = SETTINGS[name]
    if isinstance(default, list):
        items = raw if isinstance(raw, list) else [p for p in str(raw).split(os.pathsep) if p]
        return [typ(i) for i in items]
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None


def resolve_config(args: argparse.Namespace, environ=None) -> Config:
    environ = os.environ if environ is None else environ
    filed = read_config_file(args.config) if getattr(args, "config", None) else {}
    values = {}
    for name, (default, _, env) in SETTINGS.items():
        flag = getattr(args, name, None)
        if flag is not None and flag != []:
            values[name] = _convert(name, flag)
        elif env and environ.get(env):
            values[name] = _convert(name, environ[env])
        elif name in filed:
            values[name] = _convert(name, filed[name])
        else:
            values[name] = list(default) if isinstance(default, list) else default
    if getattr(args, "dphi", None) is not None and getattr(args, "dphi_exp", None) is not None:
        raise UsageError("--dphi and --dphi-exp are mutually exclusive")
    live = bool(getattr(args, "live", False))
    if live and values["seed"] is not None:
        raise UsageError("--live refuses a seed (flag or NOTP_SEED)")
    return Config(values, live, bool(getattr(args, "unsafe", False)))


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="key=value settings file")
    g.add_argument("--n-mean", type=float)
    g.add_argument("--dphi-exp", type=int, help="basis spacing 2**-EXP rad")
    g.add_argument("--dphi", type=float, help="basis spacing in rad")
    g.add_argument("--adc-bits", type=int)
    g.add_argument("--guard", type=float, help="ratio that makes '>>' concrete")
    g.add_argument("--nb", type=int, help="shuffle selector bits, 0 disables the shuffle")
    g.add_argument("--list-seed", help="file whose contents seed the permutation family")
    g.add_argument("--batch", type=int)
    g.add_argument("--cycles", type=int, help="cycles to run, 0 runs until the budget is spent")
    g.add_argument("--listen")
    g.add_argument("--peer")
    g.add_argument("--key", action="append", default=[], help="key file (repeatable)")
    g.add_argument("--seed", type=int)
    g.add_argument("--live", action="store_true", help="use operating-system entropy")
    g.add_argument("--deadline", type=float, help="seconds allowed per frame")
    g.add_argument("--out")
    g.add_argument("--capture", help="write raw frames here")
    g.add_argument("--capture-truth", help="write the ground-truth sidecar here (testing only)")
    g.add_argument("--unsafe", action="store_true", help="skip the operating-condition check")
    g.add_argument("--force", action="store_true", help="overwrite existing output files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="notp", description="Noise-based key expansion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="write a fresh genesis key file")
    _common(p)
    p.add_argument("--bits", type=int, default=1024)

    p = sub.add_parser("analyze", help="leakage and length budget over a grid or at one point")
    _common(p)
    p.add_argument("--point", nargs="*", metavar="KEY=VALUE",
                   help="single point, e.g. n=100 dphi-exp=11")
    p.add_argument("--n-values", help="comma-separated mean photon numbers")
    p.add_argument("--dphi-exps", help="comma-separated exponents")
    p.add_argument("--dphi-values", help="comma-separated spacings in rad")

    p = sub.add_parser("simulate", help="run both parties in this process over a socket pair")
    _common(p)
    p.add_argument("--genesis-bits", type=int, default=1024)
    p.add_argument("--known-plaintext", help="encrypt this file with the first harvested key")
    p.add_argument("--ciphertext", help="where to write that ciphertext")

    p = sub.add_parser("serve", help="answer networked sessions")
    _common(p)
    p.add_argument("--sessions", type=int, help="sessions to serve (default: one per key)")

    p = sub.add_parser("connect", help="run one session per key against a server")
    _common(p)

    p = sub.add_parser("attack", help="run an eavesdropper experiment")
    _common(p)
    p.add_argument("kind", choices=("eavesdrop", "kpa", "basis-block"))
    p.add_argument("--transcript")
    p.add_argument("--truth")
    p.add_argument("--trials", type=int)
    p.add_argument("--block", type=int, help="basis-block length (default floor(L))")
    p.add_argument("--plaintext")
    p.add_argument("--ciphertext")
    p.add_argument("--leak-selector", action="store_true",
                   help="give the attacker every shuffle selector")

    for name, helptext in (("encrypt", "one-time-pad a file"), ("decrypt", "undo encrypt"),
                           ("tag", "MAC a file"), ("verify", "check a MAC")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("message")
        if name == "verify":
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--tag", dest="tag_hex")
            g.add_argument("--tag-file")
    return parser


def _err(msg: str) -> None:
    print(f"notp: {msg}", file=sys.stderr)


def _parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _shuffle_for(cfg: Config, genesis: KeyBuffer) -> ShuffleConfig:
    """Permutation family keyed by ``--list-seed`` or, by default, by a hash of the genesis key.

    The key id is public (it travels in HELLO), so it must not be the seed.
    """
    if cfg.nb == 0:
        return ShuffleConfig.disabled()
    if cfg.list_seed:
        seed = hashlib.sha256(Path(cfg.list_seed).read_bytes()).digest()
    else:
        seed = hashlib.sha256(LIST_SEED_TAG + pack_bits(genesis.unspent())).digest()
    return ShuffleConfig(cfg.nb, seed)


def _session(cfg: Config, genesis: KeyBuffer, kid: bytes, role: Role):
    return init_session(genesis, cfg.params(), _shuffle_for(cfg, genesis), role, unsafe=cfg.unsafe)


def _harvest_bits(state) -> np.ndarray:
    if not state.harvested:
        return np.zeros(0, np.uint8)
    return np.concatenate([k.bits for k in state.harvested])


def _export(path: Path, state, force: bool) -> str:
    bits = _harvest_bits(state)
    kid = write_key_file(path, bits, overwrite=force)
    return kid.hex()


def _open_capture(path, force: bool):
    if path is None:
        return None, None
    if Path(path).exists() and not force:
        raise UsageError(f"{path} exists; use --force")
    fh = open(path, "wb")
    return fh, Capture(fh)


# commands ---------------------------------------------------------------------------------------

def cmd_keygen(args, cfg: Config) -> int:
    if args.bits < 64:
        raise UsageError("--bits must be at least 64")
    if not cfg.out:
        raise UsageError("keygen needs --out")
    bits = cfg.entropy().bits(args.bits)
    try:
        kid = write_key_file(cfg.out, bits, overwrite=args.force)
    except FileExistsError:
        raise UsageError(f"{cfg.out} exists; use --force") from None
    print(f"key_id={kid.hex()} bits={args.bits} path={cfg.out}")
    return EXIT_OK


def _point_settings(items, cfg: Config) -> tuple[float, float]:
    n = cfg.n_mean
    dphi = cfg.dphi if cfg.dphi is not None else 2.0 ** -cfg.dphi_exp
    for item in items or ():
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"--point expects KEY=VALUE, got {item!r}")
        k = k.strip().replace("_", "-")
        try:
            if k in ("n", "n-mean"):
                n = float(v)
            elif k == "dphi-exp":
                dphi = 2.0 ** -int(v)
            elif k == "dphi":
                dphi = float(v)
            else:
                raise UsageError(f"unknown --point key {k!r}")
        except ValueError:
            raise UsageError(f"bad number in {item!r}") from None
    return n, dphi


def _csv_floats(text, convert=float):
    try:
        return [convert(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad list {text!r}") from None


def cmd_analyze(args, cfg: Config) -> int:
    if args.point is not None:
        n, dphi = _point_settings(args.point, cfg)
        try:
            params = NoiseParams(n, dphi, cfg.adc_bits, cfg.guard)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rep = analysis.leak_report(params)
        cond = analysis.check_condition(params)
        f = analysis.format_number
        lines = [
            f"n_mean={f(n)}", f"delta_phi={f(dphi)}",
            f"p_error={f(rep.p_error)}", f"p_success={f(rep.p_success)}",
            f"h_success={f(rep.h_success)}", f"delta_h={f(rep.delta_h)}",
            f"length_limit={f(rep.length_limit)}", f"budget={math.floor(rep.length_limit)}",
            f"sigma={f(cond.sigma)}", f"ratio_left={f(cond.ratio_left)}",
            f"ratio_right={f(cond.ratio_right)}", f"condition={'pass' if cond.passed else 'fail'}",
        ]
        text = "\n".join(lines) + "\n"
    else:
        n_values = _csv_floats(args.n_values) if args.n_values else [cfg.n_mean]
        if args.dphi_values:
            dphis = _csv_floats(args.dphi_values)
        elif args.dphi_exps:
            dphis = [2.0 ** -e for e in _csv_floats(args.dphi_exps, int)]
        else:
            dphis = [cfg.params().delta_phi]
        if not n_values or not dphis:
            raise UsageError("empty grid")
        text = analysis.rows_to_csv(analysis.sweep(n_values, dphis, cfg.adc_bits, cfg.guard))
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_keys(cfg: Config) -> list[tuple[KeyBuffer, bytes, str]]:
    if not cfg.key:
        raise UsageError("no key file given (--key or NOTP_KEYFILE)")
    return [(*read_key_file(p), p) for p in cfg.key]


def cmd_simulate(args, cfg: Config) -> int:
    root = cfg.entropy()
    sub = (lambda i: root.spawn(i)) if isinstance(root, SeededEntropy) else (lambda i: root)
    if cfg.key:
        genesis, kid, _ = _load_keys(cfg)[0]
    else:
        if args.genesis_bits < 64:
            raise UsageError("--genesis-bits must be at least 64")
        from .keys import encode_key_file, key_id
        genesis = KeyBuffer(sub(0).bits(args.genesis_bits))
        kid = key_id(encode_key_file(genesis.bits))
    a = _session(cfg, genesis, kid, Role.INITIATOR)
    b = _session(cfg, genesis, kid, Role.RESPONDER)
    if cfg.capture_truth:
        a.truth_log, b.truth_log = [], []
    cap_fh, capture = _open_capture(cfg.capture, args.force)
    s1, s2 = socket.socketpair()
    ca = Channel(s1, cfg.deadline, capture, capture_received=False)
    cb = Channel(s2, cfg.deadline, capture, capture_received=False)
    outcome = {}

    def responder():
        try:
            outcome["b"] = run_responder(cb, b, kid, sub(2))
        except Exception as exc:  # noqa: BLE001 - surfaced below
            outcome["b"] = exc

    th = threading.Thread(target=responder, daemon=True)
    th.start()
    try:
        ra = run_initiator(ca, a, kid, sub(1), cfg.cycles, cfg.batch)
    finally:
        th.join()
        ca.close()
        cb.close()
        if cap_fh:
            cap_fh.close()
    rb = outcome["b"]
    if isinstance(rb, Exception):
        raise rb
    agree = (len(a.harvested) == len(b.harvested)
             and all(np.array_equal(x.bits, y.bits) for x, y in zip(a.harvested, b.harvested)))
    print(f"key_id={kid.hex()}")
    print(f"cycles={ra.cycles_completed} raw_bits={ra.raw_bits} harvested_bits={a.harvested_bits}")
    print(f"ledger_emitted={a.ledger.emitted} ledger_budget={a.ledger.budget} discarded={a.ledger.discarded}")
    print(f"rekey_needed={'yes' if ra.rekey_needed else 'no'} agreement={'OK' if agree else 'FAIL'}")
    if cfg.capture_truth:
        entries = [("initiator", t) for t in a.truth_log] + [("responder", t) for t in b.truth_log]
        sh = a.shuffle
        write_truth(cfg.capture_truth, truth_document(entries, a.params, sh.selector_bits if sh.enabled else 0,
                                                      sh.list_seed))
    if args.known_plaintext:
        if not args.ciphertext:
            raise UsageError("--known-plaintext needs --ciphertext")
        from .protocol import otp_encrypt
        Path(args.ciphertext).write_bytes(otp_encrypt(Path(args.known_plaintext).read_bytes(), a))
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, st in (("initiator.nopk", a), ("responder.nopk", b)):
            print(f"export {name} key_id={_export(out / name, st, args.force)}")
    if not agree:
        return EXIT_INTEGRITY
    if cfg.cycles > 0 and ra.cycles_completed < cfg.cycles:
        raise ScheduleCut(f"budget exhausted after {ra.cycles_completed} of {cfg.cycles} cycles")
    return EXIT_OK


def _capture_path(base, index: int, total: int):
    if base is None:
        return None
    return base if total == 1 else f"{base}.{index}"


def cmd_serve(args, cfg: Config) -> int:
    keys = _load_keys(cfg)
    by_id = {kid: genesis for genesis, kid, _ in keys}
    lock = threading.Lock()
    root = cfg.entropy()
    sessions = args.sessions if args.sessions is not None else len(keys)
    if sessions < 1:
        raise UsageError("--sessions must be positive")

    def resolve(kid):
        with lock:
            genesis = by_id.pop(kid, None)  # a genesis key roots at most one chain
        if genesis is None:
            return None
        return _session(cfg, genesis, kid, Role.RESPONDER), kid

    def entropy_for(i):
        return root.spawn(100 + i) if isinstance(root, SeededEntropy) else root

    handles = []

    def capture_for(i):
        path = _capture_path(cfg.capture, i, sessions)
        if path is None:
            return None
        fh = open(path, "wb")
        handles.append(fh)
        return Capture(fh)

    server = Server(_parse_address(cfg.listen), resolve, entropy_for, cfg.deadline, capture_for)
    host, port = server.address
    print(f"notp: listening on {host}:{port}", file=sys.stderr, flush=True)
    try:
        results = server.serve(sessions)
    finally:
        for fh in handles:
            fh.close()
    code = EXIT_OK
    out = Path(cfg.out) if cfg.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for r in results:
        if isinstance(r, Exception):
            _err(f"session failed: {r}")
            code = code or exit_code_for(r)
            continue
        print(f"session key_id={r.key_id.hex()} cycles={r.cycles_completed} raw_bits={r.raw_bits} "
              f"harvested_bits={r.state.harvested_bits}")
        if out:
            print(f"export key_id={_export(out / f'{r.key_id.hex()[:16]}.nopk', r.state, args.force)}")
    return code


def _dial(address, deadline: float, capture) -> Channel:
    end = time.monotonic() + max(deadline, 1.0)
    while True:
        try:
            return connect(address, deadline, capture)
        except ConnectionRefusedError:
            if time.monotonic() >= end:
                raise
            time.sleep(0.05)


def cmd_connect(args, cfg: Config) -> int:
    if not cfg.peer:
        raise UsageError("connect needs --peer")
    address = _parse_address(cfg.peer)
    keys = _load_keys(cfg)
    root = cfg.entropy()
    out = Path(cfg.out) if cfg.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    cut = False
    for i, (genesis, kid, _) in enumerate(keys):
        state = _session(cfg, genesis, kid, Role.INITIATOR)
        path = _capture_path(cfg.capture, i, len(keys))
        fh, capture = _open_capture(path, args.force)
        try:
            ch = _dial(address, cfg.deadline, capture)
            try:
                ent = root.spawn(i) if isinstance(root, SeededEntropy) else root
                r = run_initiator(ch, state, kid, ent, cfg.cycles, cfg.batch)
            finally:
                ch.close()
        finally:
            if fh:
                fh.close()
        print(f"session key_id={kid.hex()} cycles={r.cycles_completed} raw_bits={r.raw_bits} "
              f"harvested_bits={state.harvested_bits}")
        if out:
            print(f"export key_id={_export(out / f'{kid.hex()[:16]}.nopk', state, args.force)}")
        if cfg.cycles > 0 and r.cycles_completed < cfg.cycles:
            cut = True
    if cut:
        raise ScheduleCut("budget exhausted before the requested cycles")
    return EXIT_OK


def _attack_params(cfg: Config, transcript) -> NoiseParams:
    if transcript is not None:
        return transcript.params(cfg.guard)
    return cfg.params()


def cmd_attack(args, cfg: Config) -> int:
    tr = read_transcript(args.transcript) if args.transcript else None
    params = _attack_params(cfg, tr)
    label = attacks.format_params(params)
    rows = []
    if args.kind == "eavesdrop":
        ref = 1.0 - analysis.classical_ml_error(params)
        if tr is not None:
            if not args.truth:
                raise UsageError("scoring a transcript needs --truth")
            _, records = read_truth(args.truth)
            match_truth(tr, records)
            truth = np.concatenate([r.data for r in records])
            out = attacks.eavesdrop_ml(tr.batches, truth, params)
        else:
            out = attacks.eavesdrop_trials(params, args.trials or 100_000, _attack_entropy(cfg))
        rows.append(("eavesdrop", label, out, ref))
        _err(f"eavesdrop error={1 - out.accuracy:.6f} reference_error={1 - ref:.6f}")
    elif args.kind == "basis-block":
        limit = analysis.leak_report(params).length_limit
        block = args.block or max(1, math.floor(limit))
        out = attacks.basis_block_trials(params, block, args.trials or 1000, _attack_entropy(cfg))
        ref = 1.0 - analysis.classical_ml_error(params, repetitions=block)
        rows.append((f"basis-block:{block}", label, out, ref))
    else:
        if tr is None or not (args.truth and args.plaintext and args.ciphertext):
            raise UsageError("kpa needs --transcript, --truth, --plaintext and --ciphertext")
        doc, records = read_truth(args.truth)
        match_truth(tr, records)
        plaintext = Path(args.plaintext).read_bytes()
        ciphertext = Path(args.ciphertext).read_bytes()
        if len(plaintext) != len(ciphertext):
            raise UsageError("plaintext and ciphertext lengths differ")
        seed = bytes.fromhex(doc["list_seed"])
        defended = doc["n_b"] > 0
        leaked = None
        if args.leak_selector and defended:
            leaked = {i: (records[i].selector, seed) for i in range(1, len(records))}
        res = attacks.run_kpa(tr.batches, plaintext, ciphertext, params,
                              truth=[r.fresh for r in records[1:]], leaked=leaked)
        if not res.outcomes:
            raise UsageError("transcript holds fewer than two batches")
        ref = 0.5 if defended and not leaked else 1.0
        rows.append(("kpa", label, res.outcome, ref))
    text = attacks.report_csv(rows)
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _attack_entropy(cfg: Config) -> EntropyStream:
    return cfg.entropy()


# spend sidecar ----------------------------------------------------------------------------------

def _sidecar_path(key_path) -> Path:
    return Path(str(key_path) + ".spent")


def _sidecar_check(kid_hex: str, watermark: int) -> str:
    return hashlib.sha256(f"notp-spent\x00{kid_hex}\x00{watermark}".encode()).hexdigest()


def read_watermark(key_path, kid: bytes, nbits: int) -> int:
    path = _sidecar_path(key_path)
    if not path.exists():
        return 0
    try:
        doc = json.loads(path.read_text())
        wm = int(doc["watermark"])
        ok = (doc["key_id"] == kid.hex() and 0 <= wm <= nbits
              and hmac.compare_digest(doc["check"], _sidecar_check(kid.hex(), wm)))
    except (ValueError, KeyError, TypeError):
        ok = False
    if not ok:
        raise IntegrityError(f"spend sidecar {path} is corrupt or belongs to another key")
    return wm


def write_watermark(key_path, kid: bytes, watermark: int) -> None:
    path = _sidecar_path(key_path)
    doc = {"key_id": kid.hex(), "watermark": watermark, "check": _sidecar_check(kid.hex(), watermark)}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _spend(cfg: Config, nbits: int) -> np.ndarray:
    if len(cfg.key) != 1:
        raise UsageError("exactly one --key is required")
    path = cfg.key[0]
    key, kid = read_key_file(path)
    wm = read_watermark(path, kid, len(key))
    if wm + nbits > len(key):
        raise KeyStarvation(f"{nbits} key bits needed, {len(key) - wm} unspent")
    write_watermark(path, kid, wm + nbits)  # persist before use so bits are never reused
    return key.bits[wm:wm + nbits]


def _emit(cfg: Config, data: bytes) -> None:
    if cfg.out:
        Path(cfg.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def cmd_crypt(args, cfg: Config) -> int:
    message = Path(args.message).read_bytes()
    _emit(cfg, xor_with_key(message, _spend(cfg, 8 * len(message))) if message else b"")
    return EXIT_OK


def cmd_tag(args, cfg: Config) -> int:
    tag = hmac_tag(Path(args.message).read_bytes(), _spend(cfg, MAC_KEY_BITS))
    if cfg.out:
        Path(cfg.out).write_bytes(tag)
    else:
        print(tag.hex())
    return EXIT_OK


def cmd_verify(args, cfg: Config) -> int:
    try:
        tag = bytes.fromhex(args.tag_hex) if args.tag_hex else Path(args.tag_file).read_bytes()
    except ValueError:
        raise UsageError("--tag must be hex") from None
    expected = hmac_tag(Path(args.message).read_bytes(), _spend(cfg, MAC_KEY_BITS))
    if not hmac.compare_digest(expected, tag):
        raise IntegrityError("tag mismatch")
    print("verify=OK")
    return EXIT_OK


COMMANDS = {
    "keygen": cmd_keygen, "analyze": cmd_analyze, "simulate": cmd_simulate, "serve": cmd_serve,
    "connect": cmd_connect, "attack": cmd_attack, "encrypt": cmd_crypt, "decrypt": cmd_crypt,
    "tag": cmd_tag, "verify": cmd_verify,
}

_PEER_CODES = {ErrorCode.HANDSHAKE: EXIT_HANDSHAKE, ErrorCode.INTEGRITY: EXIT_INTEGRITY,
               ErrorCode.FRAMING: EXIT_INTEGRITY, ErrorCode.BUDGET: EXIT_REKEY}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConditionError, KeyTooShort)):
        return EXIT_USAGE
    if isinstance(exc, HandshakeError):
        return EXIT_HANDSHAKE
    if isinstance(exc, PeerError):
        return _PEER_CODES.get(exc.code, EXIT_OTHER)
    if isinstance(exc, (TransportTimeout, socket.timeout)):
        return EXIT_TIMEOUT
    if isinstance(exc, (ScheduleCut, RekeyNeeded)):
        return EXIT_REKEY
    if isinstance(exc, KeyStarvation):
        return EXIT_STARVATION
    if isinstance(exc, (IntegrityError, KeyFileError, DigestMismatch, FramingError, TranscriptError)):
        return EXIT_INTEGRITY
    return EXIT_OTHER


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        cfg.echo(args.command)
        if args.command in ("simulate", "serve", "connect"):
            cfg.params()  # bad parameters are a usage error, not a runtime one
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ValueError) as exc:
        if not isinstance(exc, (UsageError, FramingError, TranscriptError, KeyFileError)):
            _err(f"invalid argument: {exc}")
            return EXIT_USAGE
        _err(str(exc))
        return exit_code_for(exc)
    except (NetError, ProtocolError, KeyStarvation, IntegrityError, ScheduleCut, OSError) as exc:
        _err(str(exc))
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
