import configparser
import logging
import os

from Core.Core_RaftReplica import AddMember, RemoveMember
from Core.Core_SimNet import CrashNode, DropProbability, FaultScheduleError, Heal, Partition, RecoverNode

logger = logging.getLogger(__name__)

SECTION = "scenario"

# file key -> scenario override name
INT_KEYS = {
    "agents": "agents", "n": "agents",
    "frames": "frames",
    "seed": "seed",
    "failed": "failed", "m": "failed",
    "heartbeat_interval": "heartbeat_interval",
    "election_timeout_min": "election_timeout_min",
    "election_timeout_max": "election_timeout_max",
    "failure_timeout": "failure_timeout",
    "failure_frame": "failure_frame",
    "period": "period",
}
FLOAT_KEYS = {
    "gain": "gain", "k": "gain",
    "dt": "dt",
    "radius": "radius",
    "anchor_gain": "anchor_gain",
}


class ConfigError(ValueError):
    """Unreadable or malformed scenario override file."""


# =========================================================
# ACTION LINES
# =========================================================
def _int(token, line):
    try:
        return int(token)
    except ValueError:
        raise ConfigError(f"Expected an integer, got {token!r} in {line!r}") from None


def _groups(token, line):
    groups = []
    for part in token.split("|"):
        ids = [_int(t, line) for t in part.split(",") if t]
        if not ids:
            raise ConfigError(f"Empty partition group in {line!r}")
        groups.append(ids)
    return tuple(groups)


def parse_action(line):
    """
    One action line.

    Returns:
        ("fault", action) or ("membership", (command, frame))
    """
    words = line.split()
    verb, args = words[0], words[1:]
    arity = {"crash": 2, "recover": 2, "add": 2, "remove": 2, "partition": 2, "heal": 1, "drop": 2}
    if verb not in arity:
        raise ConfigError(f"Unknown setting or action {line!r}")
    if len(args) != arity[verb]:
        raise ConfigError(f"'{verb}' takes {arity[verb]} argument(s): {line!r}")

    try:
        if verb == "crash":
            return "fault", CrashNode(_int(args[0], line), _int(args[1], line))
        if verb == "recover":
            return "fault", RecoverNode(_int(args[0], line), _int(args[1], line))
        if verb == "add":
            return "membership", (AddMember(_int(args[0], line)), _int(args[1], line))
        if verb == "remove":
            return "membership", (RemoveMember(_int(args[0], line)), _int(args[1], line))
        if verb == "partition":
            return "fault", Partition(_groups(args[0], line), _int(args[1], line))
        if verb == "heal":
            return "fault", Heal(_int(args[0], line))
        try:
            p = float(args[0])
        except ValueError:
            raise ConfigError(f"Expected a probability, got {args[0]!r} in {line!r}") from None
        return "fault", DropProbability(p, _int(args[1], line))
    except FaultScheduleError as e:
        raise ConfigError(f"{line!r}: {e}") from e


def _prepare(text):
    lines = [line.strip() for line in text.splitlines()]
    if not any(line.startswith("[") for line in lines):
        lines.insert(0, f"[{SECTION}]")
    return "\n".join(lines)


def parse_overrides(text):
    """
    Parse override text into build_scenario keyword overrides.

    Plain `key = value` settings plus bare action lines; an implicit
    [scenario] section is assumed when the text has none.
    """
    parser = configparser.ConfigParser(
        allow_no_value=True, delimiters=("=",), comment_prefixes=("#", ";"), strict=False
    )
    try:
        parser.read_string(_prepare(text))
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse override file: {e}") from e
    if not parser.has_section(SECTION):
        raise ConfigError(f"Override file has no [{SECTION}] section")

    overrides = {}
    faults = []
    membership = []
    for key, value in parser.items(SECTION, raw=True):
        if value is None:
            kind, item = parse_action(key)
            (faults if kind == "fault" else membership).append(item)
        elif key in INT_KEYS:
            overrides[INT_KEYS[key]] = _int(value.strip(), f"{key} = {value}")
        elif key in FLOAT_KEYS:
            try:
                overrides[FLOAT_KEYS[key]] = float(value)
            except ValueError:
                raise ConfigError(f"Expected a number for {key!r}, got {value!r}") from None
        else:
            raise ConfigError(f"Unknown setting {key!r}")

    if faults:
        overrides["faults"] = tuple(faults)
    if membership:
        overrides["membership"] = tuple(membership)
    logger.debug("Overrides: %s", overrides)
    return overrides


def load_overrides(path):
    if not os.path.exists(path):
        raise ConfigError(f"File not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}") from e
    overrides = parse_overrides(text)
    logger.info("Configuration loaded: %s", os.path.basename(path))
    return overrides
