"""Farm hierarchy: global manager, regional managers, L1 boards with
embedded workers plus front-end CPUs, and L2/3 worker PCs.

The farm is a strict tree.  Every node gets a dense integer id (assigned in
creation order) so the event kernel and the dataflow hot path can address
nodes without hashing dataclasses; the structured :class:`NodeAddress` is
kept for queries, routing, and the control API.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class NodeKind(enum.Enum):
    GLOBAL_MANAGER = "GlobalManager"
    L1_REGIONAL_MANAGER = "L1RegionalManager"
    L23_REGIONAL_MANAGER = "L23RegionalManager"
    BOARD = "Board"
    WORKER_DSP = "WorkerDSP"
    FRONT_END_CPU = "FrontEndCPU"
    WORKER_PC = "WorkerPC"


class NodeStatus(enum.Enum):
    IN_SERVICE = "InService"
    OUT_OF_SERVICE = "OutOfService"
    SPARE = "Spare"
    REASSIGNED = "Reassigned"


class Branch(enum.Enum):
    L1 = "L1"
    L23 = "L23"
    GLOBAL = "Global"


class InvalidConfig(ValueError):
    pass


class UnknownAddress(KeyError):
    pass


class LinkDown(RuntimeError):
    """An edge on the requested route has a failed link."""

    def __init__(self, edge_child: NodeAddress):
        self.edge_child = edge_child
        super().__init__(f"link to parent of {edge_child} is down")


@dataclass(frozen=True)
class NodeAddress:
    """Position in the tree: branch, then region/board/slot as applicable.

    The global manager is ``NodeAddress(Branch.GLOBAL)``.  L1 workers and
    front-end CPUs carry (region, board, slot); the front-end CPU occupies
    the slot one past the last DSP.  L23 PCs carry (region, slot).
    """

    branch: Branch
    region: int | None = None
    board: int | None = None
    slot: int | None = None

    def __str__(self) -> str:
        if self.branch is Branch.GLOBAL:
            return "global"
        parts = [self.branch.value, f"r{self.region}"]
        if self.board is not None:
            parts.append(f"b{self.board}")
        if self.slot is not None:
            parts.append(f"s{self.slot}")
        return "/".join(parts)


GLOBAL_ADDRESS = NodeAddress(Branch.GLOBAL)


def parse_address(text: str) -> NodeAddress:
    """Inverse of ``str(NodeAddress)``: "global", "L1/r0/b3/s2",
    "L23/r1/s7", and the intermediate forms ("L1/r0", "L1/r0/b3")."""
    if text == "global":
        return GLOBAL_ADDRESS
    parts = text.split("/")
    try:
        branch = Branch(parts[0])
    except ValueError:
        raise UnknownAddress(text) from None
    if branch is Branch.GLOBAL or len(parts) < 2:
        raise UnknownAddress(text)
    fields: dict[str, int] = {}
    order = {"r": "region", "b": "board", "s": "slot"}
    for part in parts[1:]:
        key = order.get(part[:1])
        if key is None or key in fields or not part[1:].isdigit():
            raise UnknownAddress(text)
        fields[key] = int(part[1:])
    if "region" not in fields:
        raise UnknownAddress(text)
    return NodeAddress(branch, **fields)


@dataclass(frozen=True)
class FarmConfig:
    """Farm dimensions.  The full-scale default follows the hierarchy
    figure: 6 L1 regions x 100 boards x 4 DSPs (plus a front-end CPU per
    board) and 25 L2/3 regions x 100 PCs.
    """

    l1_regions: int = 6
    boards_per_region: int = 100
    dsps_per_board: int = 4
    l23_regions: int = 25
    pcs_per_region: int = 100
    spare_pcs_per_region: int = 0  # extra PCs kept in Spare status

    def validate(self) -> None:
        for name in ("l1_regions", "boards_per_region", "dsps_per_board",
                     "l23_regions", "pcs_per_region"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.spare_pcs_per_region < 0:
            raise InvalidConfig("spare_pcs_per_region must be >= 0")


@dataclass
class Node:
    node_id: int
    address: NodeAddress
    kind: NodeKind
    status: NodeStatus = NodeStatus.IN_SERVICE
    link_up: bool = True  # state of the link to the parent (root: always True)


@dataclass
class Farm:
    config: FarmConfig
    nodes: list[Node] = field(default_factory=list)           # indexed by node_id
    id_of: dict[NodeAddress, int] = field(default_factory=dict)
    parent_id: list[int] = field(default_factory=list)        # -1 for the root
    children: list[list[int]] = field(default_factory=list)

    # -- construction ------------------------------------------------------

    def _add(self, address: NodeAddress, kind: NodeKind, parent: int,
             status: NodeStatus = NodeStatus.IN_SERVICE) -> int:
        node_id = len(self.nodes)
        self.nodes.append(Node(node_id, address, kind, status))
        self.id_of[address] = node_id
        self.parent_id.append(parent)
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(node_id)
        return node_id

    # -- queries -----------------------------------------------------------

    def node(self, address: NodeAddress) -> Node:
        try:
            return self.nodes[self.id_of[address]]
        except KeyError:
            raise UnknownAddress(str(address)) from None

    def parent(self, address: NodeAddress) -> NodeAddress | None:
        pid = self.parent_id[self.node(address).node_id]
        return None if pid < 0 else self.nodes[pid].address

    def route(self, src: NodeAddress, dst: NodeAddress) -> list[NodeAddress]:
        """Unique tree path src -> dst through the lowest common ancestor.

        Raises LinkDown if any edge on the path has a failed link; the
        caller decides what to do about it.
        """
        a, b = self.node(src).node_id, self.node(dst).node_id
        up_a, up_b = [a], [b]
        while self.parent_id[up_a[-1]] >= 0:
            up_a.append(self.parent_id[up_a[-1]])
        while self.parent_id[up_b[-1]] >= 0:
            up_b.append(self.parent_id[up_b[-1]])
        ancestors_a = set(up_a)
        lca = next(n for n in up_b if n in ancestors_a)
        path = up_a[: up_a.index(lca) + 1] + list(reversed(up_b[: up_b.index(lca)]))
        # Every edge on the path is a (child, parent) pair in one direction
        # or the other; the link state lives on the child.
        for x, y in zip(path, path[1:]):
            child = x if self.parent_id[x] == y else y
            if not self.nodes[child].link_up:
                raise LinkDown(self.nodes[child].address)
        return [self.nodes[n].address for n in path]

    def counts_by_kind(self) -> dict[NodeKind, int]:
        out: dict[NodeKind, int] = {kind: 0 for kind in NodeKind}
        for node in self.nodes:
            out[node.kind] += 1
        return out

    def ids_of_kind(self, kind: NodeKind) -> list[int]:
        return [n.node_id for n in self.nodes if n.kind is kind]

    def snapshot(self) -> dict:
        """JSON-ready structural snapshot (shape + status + links)."""
        return {
            "config": {
                "l1_regions": self.config.l1_regions,
                "boards_per_region": self.config.boards_per_region,
                "dsps_per_board": self.config.dsps_per_board,
                "l23_regions": self.config.l23_regions,
                "pcs_per_region": self.config.pcs_per_region,
                "spare_pcs_per_region": self.config.spare_pcs_per_region,
            },
            "nodes": [
                {
                    "id": n.node_id,
                    "address": str(n.address),
                    "kind": n.kind.value,
                    "status": n.status.value,
                    "link_up": n.link_up,
                    "parent": self.parent_id[n.node_id] if self.parent_id[n.node_id] >= 0 else None,
                }
                for n in self.nodes
            ],
        }


def build_farm(config: FarmConfig) -> Farm:
    """Build the full tree: 1 global manager; L1 regions of boards each
    holding ``dsps_per_board`` WorkerDSPs and one FrontEndCPU (in the slot
    after the DSPs); L23 regions of WorkerPCs.  All nodes start InService
    except configured spare PCs, which start Spare.
    """
    config.validate()
    farm = Farm(config)
    root = farm._add(GLOBAL_ADDRESS, NodeKind.GLOBAL_MANAGER, parent=-1)
    for r in range(config.l1_regions):
        region = farm._add(NodeAddress(Branch.L1, r), NodeKind.L1_REGIONAL_MANAGER, root)
        for b in range(config.boards_per_region):
            board = farm._add(NodeAddress(Branch.L1, r, b), NodeKind.BOARD, region)
            for s in range(config.dsps_per_board):
                farm._add(NodeAddress(Branch.L1, r, b, s), NodeKind.WORKER_DSP, board)
            farm._add(NodeAddress(Branch.L1, r, b, config.dsps_per_board),
                      NodeKind.FRONT_END_CPU, board)
    for r in range(config.l23_regions):
        region = farm._add(NodeAddress(Branch.L23, r), NodeKind.L23_REGIONAL_MANAGER, root)
        for s in range(config.pcs_per_region):
            farm._add(NodeAddress(Branch.L23, r, slot=s), NodeKind.WORKER_PC, region)
        for s in range(config.spare_pcs_per_region):
            farm._add(NodeAddress(Branch.L23, r, slot=config.pcs_per_region + s),
                      NodeKind.WORKER_PC, region, status=NodeStatus.SPARE)
    return farm
