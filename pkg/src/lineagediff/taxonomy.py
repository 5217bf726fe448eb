"""NCBI taxdump parsing and depth-based lineage reclassification.

Class labels are produced by tracing every taxon to the root and keeping the
ancestor at a fixed depth (the root counts as depth 1). Taxa whose lineage is
shallower than the cut keep themselves as their class.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import CycleDetected, DanglingParent, MalformedDump, UnknownTaxId

DEFAULT_LAYER = 9
FIELD_SEP = "\t|\t"


@dataclass(frozen=True)
class TaxNode:
    id: int
    parent_id: int
    rank: str
    name: str = ""


@dataclass
class TaxonomyTree:
    nodes: dict[int, TaxNode]
    children: dict[int, list[int]] = field(default_factory=dict)
    root: int = 1

    def __contains__(self, taxid) -> bool:
        return taxid in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class Reclassification:
    """Mapping from original tax id to a dense class id, plus the class registry.

    ``registry[c]`` is the tax id of the node that defines class ``c``.
    """

    mapping: dict[int, int]
    registry: list[int]
    layer: int

    @property
    def num_classes(self) -> int:
        return len(self.registry)

    @property
    def null_label(self) -> int:
        return len(self.registry)


def _read_text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8")
    if isinstance(data, str):
        return data
    content = data.read()
    return content.decode("utf-8") if isinstance(content, bytes) else content


def _split_dmp(line: str, lineno: int, source: str, min_fields: int) -> list[str]:
    body = line.rstrip("\n").rstrip("\r")
    if body.endswith("\t|"):
        body = body[:-2]
    elif body.endswith("|"):
        body = body[:-1]
    else:
        raise MalformedDump(f"{source} line {lineno}: missing '\\t|' terminator")
    parts = [p.strip() for p in body.split(FIELD_SEP)]
    if len(parts) < min_fields:
        raise MalformedDump(
            f"{source} line {lineno}: expected at least {min_fields} fields, got {len(parts)}"
        )
    return parts


def parse_names(names_file) -> dict[int, str]:
    """Read names.dmp; scientific names win over any other name class."""
    names: dict[int, str] = {}
    scientific: set[int] = set()
    for lineno, line in enumerate(_read_text(names_file).splitlines(), 1):
        if not line.strip():
            continue
        parts = _split_dmp(line, lineno, "names.dmp", 4)
        try:
            taxid = int(parts[0])
        except ValueError:
            raise MalformedDump(f"names.dmp line {lineno}: bad tax id {parts[0]!r}") from None
        name_class = parts[3]
        if name_class == "scientific name":
            names[taxid] = parts[1]
            scientific.add(taxid)
        elif taxid not in scientific and taxid not in names:
            names[taxid] = parts[1]
    return names


def parse_taxdump(nodes_file, names_file=None) -> TaxonomyTree:
    text = _read_text(nodes_file)
    nodes: dict[int, TaxNode] = {}
    raw = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = _split_dmp(line, lineno, "nodes.dmp", 3)
        try:
            taxid, parent = int(parts[0]), int(parts[1])
        except ValueError:
            raise MalformedDump(
                f"nodes.dmp line {lineno}: non-integer id field {parts[:2]!r}"
            ) from None
        if taxid <= 0 or parent <= 0:
            raise MalformedDump(f"nodes.dmp line {lineno}: ids must be positive")
        if taxid in nodes:
            raise MalformedDump(f"nodes.dmp line {lineno}: duplicate tax id {taxid}")
        raw.append((taxid, parent, parts[2]))
        nodes[taxid] = None  # placeholder keeps duplicate detection O(1)
    if not raw:
        raise MalformedDump("nodes.dmp: no records")

    names = parse_names(names_file) if names_file is not None else {}
    dangling = {parent for _, parent, _ in raw if parent not in nodes}
    if dangling:
        raise DanglingParent(dangling)

    roots = [taxid for taxid, parent, _ in raw if taxid == parent]
    if len(roots) != 1:
        raise MalformedDump(f"nodes.dmp: expected exactly one root (id == parent), found {roots}")

    children: dict[int, list[int]] = {}
    for taxid, parent, rank in raw:
        nodes[taxid] = TaxNode(taxid, parent, rank, names.get(taxid, ""))
        if taxid != parent:
            children.setdefault(parent, []).append(taxid)
    tree = TaxonomyTree(nodes=nodes, children=children, root=roots[0])
    _depths(tree)  # rejects parent cycles that never reach the root
    return tree


def lineage(tree: TaxonomyTree, taxid: int) -> list[TaxNode]:
    """Nodes from the root down to ``taxid`` (inclusive)."""
    if taxid not in tree.nodes:
        raise UnknownTaxId(taxid)
    path = []
    seen = set()
    cur = taxid
    while True:
        if cur in seen:
            raise CycleDetected(f"parent links loop through tax id {cur}")
        seen.add(cur)
        node = tree.nodes.get(cur)
        if node is None:
            raise UnknownTaxId(cur)
        path.append(node)
        if node.parent_id == cur:
            break
        cur = node.parent_id
    path.reverse()
    return path


def _depths(tree: TaxonomyTree) -> dict[int, int]:
    depth: dict[int, int] = {}
    for start in tree.nodes:
        stack = []
        cur = start
        while cur not in depth:
            node = tree.nodes[cur]
            if node.parent_id == cur:
                depth[cur] = 1
                break
            stack.append(cur)
            if len(stack) > len(tree.nodes):
                raise CycleDetected(f"parent links loop above tax id {start}")
            cur = node.parent_id
        d = depth[cur]
        for taxid in reversed(stack):
            d += 1
            depth[taxid] = d
    return depth


def reclassify(tree: TaxonomyTree, layer: int = DEFAULT_LAYER) -> Reclassification:
    """Collapse every taxon onto its lineage ancestor at depth ``layer``.

    Runs in O(n) via memoized depths; class ids are dense and assigned in order
    of first appearance while walking tax ids in ascending order.
    """
    if layer < 1:
        raise ValueError(f"layer must be >= 1, got {layer}")
    depth = _depths(tree)
    anchor: dict[int, int] = {}

    def find(taxid: int) -> int:
        stack = []
        cur = taxid
        while cur not in anchor:
            if depth[cur] <= layer:
                anchor[cur] = cur
                break
            stack.append(cur)
            cur = tree.nodes[cur].parent_id
        a = anchor[cur]
        for t in stack:
            anchor[t] = a
        return a

    mapping: dict[int, int] = {}
    class_of_node: dict[int, int] = {}
    registry: list[int] = []
    for taxid in sorted(tree.nodes):
        a = find(taxid)
        cid = class_of_node.get(a)
        if cid is None:
            cid = class_of_node[a] = len(registry)
            registry.append(a)
        mapping[taxid] = cid
    return Reclassification(mapping=mapping, registry=registry, layer=layer)


def assign_labels(records, mapping) -> tuple[list[tuple[str, str, int]], int]:
    """Attach class ids to ``(record_id, sequence, tax_id)`` records.

    Returns the labeled records and the number dropped for lacking a mapping.
    """
    if isinstance(mapping, Reclassification):
        mapping = mapping.mapping
    labeled = []
    dropped = 0
    for rid, seq, taxid in records:
        cid = mapping.get(taxid)
        if cid is None:
            dropped += 1
            continue
        labeled.append((rid, seq, cid))
    return labeled, dropped


def class_stats(dataset) -> dict[int, tuple[int, float]]:
    """Per-class ``(count, fraction)``; accepts labeled records or bare class ids."""
    labels = [item[-1] if isinstance(item, tuple) else item for item in dataset]
    counts = Counter(labels)
    total = sum(counts.values())
    return {cid: (n, n / total) for cid, n in sorted(counts.items())}
