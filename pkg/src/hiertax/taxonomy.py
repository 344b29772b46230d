"""Class hierarchy: parsing, validation, head derivation and label routing.

The taxonomy is an immutable tree of tagged nodes read from a line-oriented
text file.  Classification heads are derived from it (one softmax head per
internal node with at least two children) and leaf labels are routed
through the tree into per-head training targets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy files or invalid queries."""


# route_label target for a head the sample's path does not traverse
NOT_APPLICABLE = -1


@dataclass(frozen=True)
class TaxonomyNode:
    tag: str
    name: str
    parent: str | None
    children: tuple[str, ...]
    level: int
    count: int | None = None


@dataclass(frozen=True)
class Head:
    """Softmax head over the children of one internal node.

    `classes` are the child tags in declaration order; when `leaky`, a
    virtual fall-back slot is appended after them, so the effective output
    width is len(classes) + 1.
    """

    id: str
    parent_tag: str
    classes: tuple[str, ...]
    leaky: bool

    @property
    def n_real(self) -> int:
        return len(self.classes)

    @property
    def width(self) -> int:
        return len(self.classes) + (1 if self.leaky else 0)

    @property
    def leaky_index(self) -> int:
        if not self.leaky:
            raise ValueError(f"head {self.id} has no leaky slot")
        return len(self.classes)


@dataclass(frozen=True)
class Taxonomy:
    nodes: dict[str, TaxonomyNode]
    root: str
    order: tuple[str, ...] = field(repr=False)  # declaration order

    def node(self, tag: str) -> TaxonomyNode:
        try:
            return self.nodes[tag]
        except KeyError:
            raise TaxonomyError(f"unknown tag {tag!r}") from None

    def is_leaf(self, tag: str) -> bool:
        return not self.node(tag).children

    def max_level(self) -> int:
        return max(n.level for n in self.nodes.values())

    def serialize(self) -> str:
        lines = []
        for tag in self.order:
            n = self.nodes[tag]
            fields = [n.tag, n.parent if n.parent is not None else "-", n.name]
            if n.count is not None:
                fields.append(str(n.count))
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"

    def content_hash(self) -> bytes:
        """SHA-256 of the canonical serialization (used by checkpoints)."""
        return hashlib.sha256(self.serialize().encode("utf-8")).digest()


def parse_taxonomy(text: str) -> Taxonomy:
    """Parse the tab-separated node-per-line format.

    Columns: tag, parent tag (`-` for the root), display name, optional
    integer count.  `#` lines are comments.  Child order is declaration
    order.  Counts, when present, are validated bottom-up (each internal
    count must equal the sum of its children's counts).
    """
    rows: list[tuple[int, str, str | None, str, int | None]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise TaxonomyError(
                f"line {lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}"
            )
        tag, parent, name = parts[0], parts[1], parts[2]
        if not tag or any(c.isspace() for c in tag):
            raise TaxonomyError(f"line {lineno}: bad tag {tag!r}")
        if tag in seen:
            raise TaxonomyError(f"line {lineno}: duplicate tag {tag!r}")
        seen.add(tag)
        count = None
        if len(parts) == 4:
            try:
                count = int(parts[3])
            except ValueError:
                raise TaxonomyError(f"line {lineno}: bad count {parts[3]!r}") from None
            if count < 0:
                raise TaxonomyError(f"line {lineno}: negative count {count}")
        rows.append((lineno, tag, None if parent == "-" else parent, name, count))

    roots = [r for r in rows if r[2] is None]
    if not rows:
        raise TaxonomyError("empty taxonomy file")
    if len(roots) == 0:
        raise TaxonomyError("no root node (parent '-') declared")
    if len(roots) > 1:
        raise TaxonomyError(
            "multiple roots: " + ", ".join(f"{r[1]} (line {r[0]})" for r in roots)
        )

    parent_of = {tag: parent for _, tag, parent, _, _ in rows}
    for lineno, tag, parent, _, _ in rows:
        if parent is not None and parent not in parent_of:
            raise TaxonomyError(f"line {lineno}: unknown parent {parent!r} for {tag!r}")

    children: dict[str, list[str]] = {tag: [] for _, tag, _, _, _ in rows}
    for _, tag, parent, _, _ in rows:
        if parent is not None:
            children[parent].append(tag)

    # levels via walk from the root; anything unreached sits on a cycle
    root = roots[0][1]
    level = {root: 0}
    stack = [root]
    while stack:
        cur = stack.pop()
        for ch in children[cur]:
            level[ch] = level[cur] + 1
            stack.append(ch)
    unreached = [tag for _, tag, _, _, _ in rows if tag not in level]
    if unreached:
        lines = {tag: ln for ln, tag, _, _, _ in rows}
        raise TaxonomyError(
            "cycle: nodes not reachable from root: "
            + ", ".join(f"{t} (line {lines[t]})" for t in unreached)
        )

    nodes = {
        tag: TaxonomyNode(
            tag=tag,
            name=name,
            parent=parent,
            children=tuple(children[tag]),
            level=level[tag],
            count=count,
        )
        for _, tag, parent, name, count in rows
    }
    order = tuple(tag for _, tag, _, _, _ in rows)
    t = Taxonomy(nodes=nodes, root=root, order=order)

    if len(leaves(t)) < 2:
        raise TaxonomyError("degenerate taxonomy: fewer than 2 leaves")

    counted = [n for n in nodes.values() if n.count is not None]
    if counted:
        for n in counted:
            child_counts = [nodes[c].count for c in n.children]
            if n.children and all(c is not None for c in child_counts):
                total = sum(child_counts)  # type: ignore[arg-type]
                if total != n.count:
                    raise TaxonomyError(
                        f"count mismatch at {n.tag}: {n.count} != sum of children {total}"
                    )
    return t


def dfs_order(t: Taxonomy) -> list[str]:
    """All tags in pre-order depth-first traversal from the root."""
    out: list[str] = []

    def visit(tag: str) -> None:
        out.append(tag)
        for ch in t.nodes[tag].children:
            visit(ch)

    visit(t.root)
    return out


def leaves(t: Taxonomy) -> list[str]:
    """Leaf tags in depth-first order consistent with declaration order."""
    return [tag for tag in dfs_order(t) if not t.nodes[tag].children]


def internal_nodes(t: Taxonomy) -> list[str]:
    """Internal node tags ordered by (level, declaration order)."""
    tagged = [t.nodes[tag] for tag in t.order if t.nodes[tag].children]
    tagged.sort(key=lambda n: (n.level, t.order.index(n.tag)))
    return [n.tag for n in tagged]


def derive_heads(t: Taxonomy, leaky: bool) -> list[Head]:
    """One head per internal node with >= 2 children, by (level, declaration)."""
    heads = []
    for tag in internal_nodes(t):
        node = t.nodes[tag]
        if len(node.children) < 2:
            continue
        heads.append(Head(id=tag, parent_tag=tag, classes=node.children, leaky=leaky))
    return heads


def path_to_root(t: Taxonomy, tag: str) -> list[str]:
    """Tags from `tag` up to the root, inclusive."""
    node = t.node(tag)
    path = [node.tag]
    while node.parent is not None:
        node = t.nodes[node.parent]
        path.append(node.tag)
    return path


@dataclass(frozen=True)
class RoutedLabel:
    """Per-head training target for one leaf label.

    targets[i] for heads[i]: a class index into the head's classes, the
    head's leaky index (== n_real) for leaky heads off the path, or
    NOT_APPLICABLE (-1) for non-leaky heads off the path.
    """

    leaf: str
    targets: tuple[int, ...]


def route_label(t: Taxonomy, heads: list[Head], leaf: str) -> RoutedLabel:
    if not t.is_leaf(leaf):
        raise TaxonomyError(f"{leaf!r} is not a leaf node")
    path = path_to_root(t, leaf)
    on_path = set(path)
    child_of = {}
    for i in range(len(path) - 1):
        child_of[path[i + 1]] = path[i]
    targets = []
    for head in heads:
        if head.parent_tag in on_path and head.parent_tag in child_of:
            targets.append(head.classes.index(child_of[head.parent_tag]))
        elif head.leaky:
            targets.append(head.leaky_index)
        else:
            targets.append(NOT_APPLICABLE)
    return RoutedLabel(leaf=leaf, targets=tuple(targets))


# Display aliases for the bundled pulmonary-lesion hierarchy: its four heads
# are conventionally shown as H1..H4 rather than by their parent tags.
_PULMONARY_TAGS = frozenset(
    {
        "H0", "H1a", "H1b", "H1c", "H2a", "H2b", "H2c", "H2d", "H2e",
        "H3a", "H3b", "H3c", "H3d", "H4a", "H4b",
    }
)
_PULMONARY_HEAD_ALIASES = {"H0": "H1", "H1a": "H2", "H1b": "H3", "H2a": "H4"}


def head_display_name(t: Taxonomy, head_id: str) -> str:
    if set(t.nodes) == _PULMONARY_TAGS and head_id in _PULMONARY_HEAD_ALIASES:
        return _PULMONARY_HEAD_ALIASES[head_id]
    return head_id
