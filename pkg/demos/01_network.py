"""Build a grid network, inspect its agent graph and round-trip the text format."""

from __future__ import annotations

from atsc_marl.netmodel import build_grid, format_network, hop_distance, parse_network

net = build_grid(3, 3, lane_length=200.0, phases_per_node=2)
graph = net.agent_graph
print("agents:", net.agents)
print("entry lanes:", len(net.entry_lanes), "exit lanes:", len(net.exit_lanes))
for a in ("n0_0", "n0_1", "n1_1"):
    print(f"{a}: neighbors {graph.neighbors(a)}")
print("corner to corner hops:", hop_distance(graph, "n0_0", "n2_2"))

# phases list the (incoming, outgoing) lane pairs that discharge together
for ph in net.phases("n1_1"):
    print("phase", ph.id, "serves", sorted(ph.served_lanes))

text = format_network(net)
print(text.splitlines()[:3], "...")
assert format_network(parse_network(text)) == text
