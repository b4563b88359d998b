import pytest

from Core.Core_LoadConfig import ConfigError, load_overrides, parse_action, parse_overrides
from Core.Core_RaftReplica import AddMember, RemoveMember
from Core.Core_SimNet import CrashNode, DropProbability, Heal, Partition, RecoverNode
from Lib.Lib_Scenarios import build_scenario


def test_settings_and_aliases():
    assert parse_overrides("n = 6\nk = 0.5\nframes=40\nanchor_gain = 2\n") == {
        "agents": 6, "gain": 0.5, "frames": 40, "anchor_gain": 2.0,
    }


def test_action_lines_keep_file_order():
    overrides = parse_overrides(
        "crash 1 30\n"
        "recover 1 40\n"
        "add 5 60\n"
        "partition 0,1|2,3 10\n"
        "remove 2 70\n"
        "heal 20\n"
        "drop 0.25 15\n"
    )
    assert overrides["faults"] == (
        CrashNode(1, 30),
        RecoverNode(1, 40),
        Partition(((0, 1), (2, 3)), 10),
        Heal(20),
        DropProbability(0.25, 15),
    )
    assert overrides["membership"] == ((AddMember(5), 60), (RemoveMember(2), 70))


def test_explicit_section_and_comments():
    text = "# run settings\n[scenario]\n; quieter\nseed = 4\n"
    assert parse_overrides(text) == {"seed": 4}


def test_parse_action_kinds():
    assert parse_action("crash 3 9") == ("fault", CrashNode(3, 9))
    assert parse_action("add 4 50") == ("membership", (AddMember(4), 50))


@pytest.mark.parametrize("text", [
    "wings = 3",
    "agents = many",
    "gain = fast",
    "jump 1 2",
    "crash 1",
    "crash one 3",
    "drop 2.0 3",
    "drop lots 3",
    "partition |1 5",
    "[other]\nseed = 4",
], ids=["unknown-key", "bad-int", "bad-float", "unknown-action", "arity", "bad-node",
        "bad-probability", "non-numeric-probability", "empty-group", "wrong-section"])
def test_malformed_overrides(text):
    with pytest.raises(ConfigError):
        parse_overrides(text)


def test_load_from_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("n = 6\ncrash 1 30\ncrash 2 30\n", encoding="utf-8")
    overrides = load_overrides(str(path))
    spec = build_scenario("C", **overrides)
    assert spec.agents == 6
    assert [a.node for a in spec.faults] == [1, 2]


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_overrides(str(tmp_path / "absent.ini"))
