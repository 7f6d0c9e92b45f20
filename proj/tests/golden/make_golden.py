"""Regenerates graph.json and graph.dot for the seven-phase fixture.

Independent of the C++ code: cosine similarities, edges, path enumeration and
ranking are recomputed here from the fixture table.
"""

import json
import math
from pathlib import Path

PHASES = [
    ("Reconnaissance", "Reconnaissance"),
    ("Weaponization", "Weaponization"),
    ("Delivery", "Delivery"),
    ("Exploitation", "Exploitation"),
    ("Installation", "Installation"),
    ("CommandAndControl", "Command and Control"),
    ("ActionsOnObjectives", "Actions on Objectives"),
]

# (phase, label, description, embedding)
FIXTURE = [
    ("Reconnaissance", "Active Scanning", "scan victim hosts", [4.0, 1.0, 0.0, 0.0]),
    ("Reconnaissance", "Gather Victim Identity Information", "collect staff emails", [1.0, 4.0, 0.0, 1.0]),
    ("Reconnaissance", "Search Open Websites", "browse public sites", [0.0, 0.0, 4.0, 1.0]),
    ("Weaponization", "Develop Capabilities", "build exploit kit", [4.0, 2.0, 0.0, 0.0]),
    ("Weaponization", "Obtain Capabilities", "buy malware", [0.0, 1.0, 0.0, 4.0]),
    ("Weaponization", "Stage Capabilities", "upload payloads", [1.0, 4.0, 1.0, 0.0]),
    ("Delivery", "Drive-by Compromise", "watering hole", [0.0, 0.0, 4.0, 2.0]),
    ("Delivery", "Phishing", "malicious attachment", [3.0, 3.0, 0.0, 0.0]),
    ("Delivery", "Replication Through Removable Media", "usb drop", [0.0, 1.0, 1.0, 4.0]),
    ("Exploitation", "Exploitation for Client Execution", "document exploit", [3.0, 4.0, 0.0, 0.0]),
    ("Exploitation", "Exploit Public-Facing Application", "web exploit", [0.0, 0.0, 3.0, 4.0]),
    ("Exploitation", "User Execution", "victim opens file", [4.0, 1.0, 1.0, 0.0]),
    ("Installation", "Boot or Logon Autostart Execution", "registry run key", [2.0, 4.0, 0.0, 1.0]),
    ("Installation", "Create Account", "new local account", [0.0, 0.0, 1.0, 4.0]),
    ("Installation", "Scheduled Task", "cron job", [4.0, 0.0, 1.0, 0.0]),
    ("CommandAndControl", "Application Layer Protocol", "https beacon", [1.0, 4.0, 0.0, 0.0]),
    ("CommandAndControl", "Ingress Tool Transfer", "download tools", [4.0, 1.0, 0.0, 1.0]),
    ("CommandAndControl", "Proxy", "relay traffic", [0.0, 1.0, 4.0, 0.0]),
    ("ActionsOnObjectives", "Data Encrypted for Impact", "ransomware", [3.0, 1.0, 0.0, 0.0]),
    ("ActionsOnObjectives", "Exfiltration Over C2 Channel", "steal data", [1.0, 3.0, 0.0, 0.0]),
    ("ActionsOnObjectives", "Inhibit System Recovery", "delete backups", [0.0, 0.0, 1.0, 3.0]),
]
TAU = 0.8
MAX_PATHS = 10


def norm(v):
    s = 0.0
    for x in v:
        s += x * x
    return math.sqrt(s)


def cosine(u, v):
    nu, nv = norm(u), norm(v)
    dot = 0.0
    for a, b in zip(u, v):
        dot += a * b
    return min(1.0, max(-1.0, dot / (nu * nv)))


def main():
    order = [p for p, _ in PHASES]
    nodes = sorted(FIXTURE, key=lambda n: (order.index(n[0]), n[1].encode()))
    edges = []
    for i, a in enumerate(nodes):
        for j, b in enumerate(nodes):
            if order.index(b[0]) == order.index(a[0]) + 1:
                s = cosine(a[3], b[3])
                if s >= TAU:
                    edges.append((i, j, s))
    edges.sort()
    out = {i: [] for i in range(len(nodes))}
    has_in = set()
    for e in edges:
        out[e[0]].append(e)
        has_in.add(e[1])

    paths = []

    def walk(v, stack, sims):
        stack = stack + [v]
        if not out[v]:
            if len(stack) > 1:
                score = 0.0
                for s in reversed(sims):
                    score = math.log(s) + score
                paths.append((stack, score))
            return
        for _, t, s in out[v]:
            walk(t, stack, sims + [s])

    for v in range(len(nodes)):
        if v not in has_in:
            walk(v, [], [])
    paths.sort(key=lambda p: (-p[1], [nodes[i][1].encode() for i in p[0]], len(p[0]), p[0]))
    paths = paths[:MAX_PATHS]

    doc = {
        "format": "killchain.chain_graph/1",
        "tau": TAU,
        "nodes": [
            {"id": i, "phase": n[0], "label": n[1], "description": n[2], "embedding": n[3]}
            for i, n in enumerate(nodes)
        ],
        "edges": [{"source": a, "target": b, "similarity": s} for a, b, s in edges],
        "paths": [
            {
                "nodes": p,
                "labels": [nodes[i][1] for i in p],
                "score": score,
                "start_phase": nodes[p[0]][0],
                "end_phase": nodes[p[-1]][0],
            }
            for p, score in paths
        ],
    }
    here = Path(__file__).parent
    (here / "graph.json").write_text(json.dumps(doc, indent=2) + "\n")

    marked = set()
    if paths:
        best = paths[0][0]
        marked = set(zip(best, best[1:]))
    lines = ["digraph kill_chain {", "  rankdir=LR;", "  node [shape=box, style=rounded];"]
    for idx, (name, display) in enumerate(PHASES, start=1):
        lines.append(f"  subgraph cluster_{idx} {{")
        lines.append(f'    label="{display}";')
        for i, n in enumerate(nodes):
            if n[0] == name:
                lines.append(f'    n{i} [label="{n[1]}"];')
        lines.append("  }")
    for a, b, s in edges:
        attrs = f'label="{s:.3f}"'
        if (a, b) in marked:
            attrs += ', color="red", penwidth=2'
        lines.append(f"  n{a} -> n{b} [{attrs}];")
    lines.append("}")
    (here / "graph.dot").write_text("\n".join(lines) + "\n")
    print(len(edges), "edges,", len(paths), "paths")
    for p, score in paths[:3]:
        print(score, [nodes[i][1] for i in p])


if __name__ == "__main__":
    main()
