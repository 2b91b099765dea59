import random

import pytest

from techkg.errors import ParseError, SchemaError
from techkg.model import EdgeRelation, NodeKind, TechniqueGraph
from techkg.serialize import (
    export_dot,
    export_gml,
    export_json,
    graph_to_dict,
    import_gml,
    import_json,
)
from conftest import quick_graph, random_graph


def test_two_node_graph_lists_attacker_before_node_one():
    g = TechniqueGraph("T1059", "log")
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0)
    p = g.add_node(NodeKind.PROCESS, "x.exe")
    g.add_edge(0, p.id, EdgeRelation.PROCESS_START)
    text = export_gml(g)
    assert text.index('kind "Attacker"') < text.index('kind "Process"')
    assert text.index("id 0") < text.index("id 1")


def test_attacker_node_serialized_first():
    g = quick_graph()
    relabeled = g.relabel({0: 4, 1: 0, 2: 1, 3: 2, 4: 3})
    text = export_gml(relabeled)
    first_node = text.index("node [")
    assert text[first_node:].splitlines()[1].strip() == "id 4"
    assert 'kind "Attacker"' in text[first_node:].split("]")[0]


def test_empty_graph_round_trip():
    g = TechniqueGraph("T1059", "log")
    text = export_gml(g)
    assert "node [" not in text
    assert import_gml(text) == g


def test_round_trip_identity_fixture_graphs():
    g = quick_graph()
    assert import_gml(export_gml(g)) == g


def test_round_trip_identity_random_graphs():
    rng = random.Random(99)
    for _ in range(40):
        g = random_graph(rng, source=rng.choice(["log", "cti"]))
        assert import_gml(export_gml(g)) == g


def test_round_trip_escaping_quotes_and_backslashes():
    g = TechniqueGraph("T1059", "log")
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0)
    tricky = 'C:\\Program Files\\"quoted"\\x\\\\y.exe'
    node = g.add_node(NodeKind.PROCESS, tricky, extra_labels={'say "hi"\\'})
    g.add_edge(0, node.id, EdgeRelation.PROCESS_START)
    back = import_gml(export_gml(g))
    assert back.nodes[node.id].label == tricky
    assert back.nodes[node.id].extra_labels == {'say "hi"\\'}


def test_round_trip_control_characters_in_labels():
    g = TechniqueGraph("T1059", "log")
    g.add_node(NodeKind.ATTACKER, "attacker", node_id=0)
    weird = "C:\\line\nbreak\\and\rreturn\\n.txt"
    node = g.add_node(NodeKind.FILE, weird)
    g.add_edge(0, node.id, EdgeRelation.FILE_CREATE)
    back = import_gml(export_gml(g))
    assert back.nodes[node.id].label == weird
    assert back == g


def test_round_trip_preserves_all_fields():
    g = quick_graph()
    g.nodes[1].extra_labels = {"alt-a", "alt-b"}
    g.nodes[1].generalized = True
    g.nodes[2].common = True
    g.edges[(1, 2)].timestamps = [3, 1, 2]
    g.edges[(1, 2)].timestamps = sorted(g.edges[(1, 2)].timestamps)
    back = import_gml(export_gml(g))
    assert back == g


def test_export_is_deterministic():
    g = quick_graph()
    assert export_gml(g) == export_gml(quick_graph())


def test_unknown_kind_is_schema_error():
    text = export_gml(quick_graph()).replace('kind "Process"', 'kind "Floppy"', 1)
    with pytest.raises(SchemaError):
        import_gml(text)


def test_truncated_file_is_parse_error():
    text = export_gml(quick_graph())
    with pytest.raises(ParseError):
        import_gml(text[: len(text) // 2].rsplit("\n", 1)[0])


def test_parse_error_carries_line_number():
    bad = 'graph [\n  directed 1\n  technique_id\n]\n'
    with pytest.raises(ParseError) as err:
        import_gml(bad)
    assert err.value.line == 3


def test_gml_uses_lf_only():
    assert "\r" not in export_gml(quick_graph())


def test_json_mirror_round_trip():
    g = quick_graph()
    assert import_json(export_json(g)) == g
    payload = graph_to_dict(g)
    assert payload["nodes"][0]["kind"] == "Attacker"
    assert payload["technique_id"] == "T1547.001"


def test_json_missing_field_is_schema_error():
    with pytest.raises(SchemaError):
        import_json('{"technique_id": "T1547.001"}')


def test_dot_export_mentions_every_node():
    g = quick_graph()
    dot = export_dot(g)
    assert dot.startswith("digraph")
    for node in g.nodes.values():
        assert f"n{node.id} " in dot
