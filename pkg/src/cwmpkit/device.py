"""CPE-side data model: a parameter tree plus the profile that feeds it.

The tree maps full dotted paths to leaf nodes and knows which partial paths
are multi-instance tables.  Instance numbers count up and are never reused,
so a transcript that mentions instance 3 keeps meaning the same thing after
deletes.  Profiles are plain tab-separated text files that round-trip
through save/load, and one can also be distilled from a recorded session.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

from . import textconf
from .codec import (
    DeviceId,
    Inform,
    ParameterAttribute,
    ParameterInfo,
    ParameterValue,
    RpcEnvelope,
)
from .wire import SessionTranscript

NOTIFICATION_NAMES = {0: "off", 1: "passive", 2: "active"}
NOTIFICATION_VALUES = {v: k for k, v in NOTIFICATION_NAMES.items()}

_INT_TYPES = {"xsd:int", "xsd:unsignedInt", "xsd:long", "xsd:unsignedLong"}

GUARD_URL_PARAMS = (
    "InternetGatewayDevice.ManagementServer.URL",
    "Device.ManagementServer.URL",
)


class ParamError(Exception):
    """Parameter operation failure carrying its fault code."""

    def __init__(self, code: int, string: str, param_faults: tuple = ()):
        super().__init__(f"{code} {string}")
        self.code = code
        self.string = string
        self.param_faults = param_faults


@dataclass
class ParameterNode:
    value_type: str = "xsd:string"
    value: str = ""
    writable: bool = False
    notification: int = 0
    access_list: tuple[str, ...] = ()


@dataclass
class MultiSpec:
    next_instance: int = 1
    template: dict[str, ParameterNode] = field(default_factory=dict)


class ParameterTree:
    def __init__(self) -> None:
        self.leaves: dict[str, ParameterNode] = {}
        self.multi: dict[str, MultiSpec] = {}
        self.instances: dict[str, set[int]] = {}

    # -- construction ---------------------------------------------------

    def put(self, path: str, node: ParameterNode) -> None:
        if not path or path.endswith("."):
            raise ValueError(f"leaf path must not end with a dot: {path!r}")
        self.leaves[path] = node

    def declare_multi(self, partial_path: str, template: dict[str, ParameterNode] | None = None, next_instance: int = 1) -> None:
        if not partial_path.endswith("."):
            raise ValueError(f"multi-instance path must end with a dot: {partial_path!r}")
        self.multi[partial_path] = MultiSpec(next_instance=next_instance, template=dict(template or {}))
        self.instances.setdefault(partial_path, set())

    # -- introspection ----------------------------------------------------

    def object_paths(self) -> dict[str, bool]:
        """All object paths implied by the leaves, mapped to writability.

        An object is writable when instances can be added (a declared table)
        or removed (an instance of one).
        """
        objects: dict[str, bool] = {}
        for leaf in self.leaves:
            parts = leaf.split(".")
            for i in range(1, len(parts)):
                objects.setdefault(".".join(parts[:i]) + ".", False)
        for partial, spec in self.multi.items():
            objects[partial] = True
            parts = partial.split(".")
            for i in range(1, len(parts) - 1):
                objects.setdefault(".".join(parts[:i]) + ".", False)
            for inst in self.instances.get(partial, ()):
                objects[f"{partial}{inst}."] = True
        return objects

    # -- reads ------------------------------------------------------------

    def get_values(self, path: str) -> list[ParameterValue]:
        if path == "" or path.endswith("."):
            hits = [
                ParameterValue(p, node.value, node.value_type)
                for p, node in self.leaves.items()
                if p.startswith(path)
            ]
            if not hits and path not in self.object_paths() and path != "":
                raise ParamError(9005, f"unknown parameter path {path!r}")
            return hits
        node = self.leaves.get(path)
        if node is None:
            raise ParamError(9005, f"unknown parameter {path!r}")
        return [ParameterValue(path, node.value, node.value_type)]

    def get_names(self, path: str, next_level: bool) -> list[ParameterInfo]:
        objects = self.object_paths()
        if path and not path.endswith("."):
            if path not in self.leaves:
                raise ParamError(9005, f"unknown parameter {path!r}")
            if next_level:
                raise ParamError(9003, "NextLevel is not valid for a leaf path")
            return [ParameterInfo(path, self.leaves[path].writable)]
        if path and path not in objects:
            raise ParamError(9005, f"unknown object path {path!r}")
        out: list[ParameterInfo] = []
        if next_level:
            depth = path.count(".") + 1 if path else 1
            seen: set[str] = set()
            for obj, writable in objects.items():
                if obj.startswith(path) and obj.count(".") == depth and obj != path and obj not in seen:
                    seen.add(obj)
                    out.append(ParameterInfo(obj, writable))
            for leaf, node in self.leaves.items():
                if leaf.startswith(path) and leaf.count(".") == depth - 1 and (not path or leaf[len(path):].count(".") == 0):
                    out.append(ParameterInfo(leaf, node.writable))
        else:
            if path:
                out.append(ParameterInfo(path, objects.get(path, False)))
            for obj, writable in sorted(objects.items()):
                if obj.startswith(path) and obj != path:
                    out.append(ParameterInfo(obj, writable))
            for leaf, node in self.leaves.items():
                if leaf.startswith(path):
                    out.append(ParameterInfo(leaf, node.writable))
        return out

    def get_attributes(self, names: tuple[str, ...]) -> list[ParameterAttribute]:
        out = []
        for name in names:
            if name.endswith(".") or name == "":
                found = False
                for p, node in self.leaves.items():
                    if p.startswith(name):
                        out.append(ParameterAttribute(p, node.notification, node.access_list))
                        found = True
                if not found:
                    raise ParamError(9005, f"unknown parameter path {name!r}")
                continue
            node = self.leaves.get(name)
            if node is None:
                raise ParamError(9005, f"unknown parameter {name!r}")
            out.append(ParameterAttribute(name, node.notification, node.access_list))
        return out

    # -- writes -----------------------------------------------------------

    def _check_value(self, node: ParameterNode, value: str) -> str | None:
        if node.value_type in _INT_TYPES:
            try:
                int(value.strip() or "0")
            except ValueError:
                return f"not an integer for {node.value_type}"
            if node.value_type.startswith("xsd:unsigned") and int(value.strip() or "0") < 0:
                return "negative value for unsigned type"
        elif node.value_type == "xsd:boolean":
            if value.strip().lower() not in ("0", "1", "true", "false", ""):
                return "not a boolean"
        return None

    def set_values(self, pairs: list[ParameterValue]) -> list[str]:
        """Apply all or none.  Returns paths whose active-notification value
        actually changed, for the caller to turn into a VALUE CHANGE event."""
        from .codec import ParamFault

        faults = []
        for p in pairs:
            node = self.leaves.get(p.path)
            if node is None:
                faults.append(ParamFault(p.path, 9005, "invalid parameter name"))
                continue
            if not node.writable:
                faults.append(ParamFault(p.path, 9008, "attempt to set a non-writable parameter"))
                continue
            problem = self._check_value(node, p.value)
            if problem:
                faults.append(ParamFault(p.path, 9007, problem))
        if faults:
            raise ParamError(9003, "invalid arguments", tuple(faults))
        changed_active = []
        for p in pairs:
            node = self.leaves[p.path]
            if node.value != p.value and node.notification == 2:
                changed_active.append(p.path)
            node.value = p.value
        return changed_active

    def set_attributes(self, changes) -> None:
        for ch in changes:
            node = self.leaves.get(ch.path)
            if node is None:
                raise ParamError(9005, f"unknown parameter {ch.path!r}")
        for ch in changes:
            node = self.leaves[ch.path]
            if ch.notification_change:
                if ch.notification not in (0, 1, 2):
                    raise ParamError(9003, f"notification level {ch.notification} out of range")
                node.notification = ch.notification
            if ch.access_list_change:
                node.access_list = tuple(ch.access_list)

    def add_object(self, partial_path: str) -> int:
        spec = self.multi.get(partial_path)
        if spec is None:
            raise ParamError(9005, f"{partial_path!r} is not an instantiable table")
        instance = spec.next_instance
        spec.next_instance += 1
        self.instances.setdefault(partial_path, set()).add(instance)
        for rel, node in spec.template.items():
            self.leaves[f"{partial_path}{instance}.{rel}"] = ParameterNode(
                value_type=node.value_type,
                value=node.value,
                writable=node.writable,
                notification=node.notification,
                access_list=node.access_list,
            )
        return instance

    def delete_object(self, instance_path: str) -> None:
        if not instance_path.endswith("."):
            raise ParamError(9005, f"instance path must end with a dot: {instance_path!r}")
        head, _, tail = instance_path[:-1].rpartition(".")
        partial = head + "."
        spec = self.multi.get(partial)
        try:
            instance = int(tail)
        except ValueError:
            instance = -1
        if spec is None or instance not in self.instances.get(partial, set()):
            raise ParamError(9005, f"unknown instance {instance_path!r}")
        self.instances[partial].discard(instance)
        for leaf in [p for p in self.leaves if p.startswith(instance_path)]:
            del self.leaves[leaf]

    # -- persistence --------------------------------------------------------

    def to_table_lines(self) -> list[str]:
        lines = []
        for partial, spec in self.multi.items():
            lines.append(f"{partial}\tmulti\tw\toff\tnext={spec.next_instance}")
            for rel, node in spec.template.items():
                lines.append(
                    f"{partial}@template.{rel}\t{node.value_type}\t{'w' if node.writable else 'ro'}\t"
                    f"{NOTIFICATION_NAMES[node.notification]}\t{node.value}"
                )
        for path, node in self.leaves.items():
            lines.append(
                f"{path}\t{node.value_type}\t{'w' if node.writable else 'ro'}\t"
                f"{NOTIFICATION_NAMES[node.notification]}\t{node.value}"
            )
        return lines

    @classmethod
    def from_table_lines(cls, lines: list[str]) -> "ParameterTree":
        tree = cls()
        for raw in lines:
            fields = raw.split("\t", 4)
            if len(fields) < 5:
                raise textconf.ConfigError(f"parameter line needs 5 tab-separated fields: {raw!r}")
            path, value_type, writable, notification, value = fields
            path = path.strip()
            if value_type.strip() == "multi":
                next_instance = 1
                if value.strip().startswith("next="):
                    next_instance = int(value.strip()[5:])
                tree.declare_multi(path, next_instance=next_instance)
                continue
            node = ParameterNode(
                value_type=value_type.strip(),
                value=value,
                writable=writable.strip().lower() in ("w", "rw", "1", "true"),
                notification=NOTIFICATION_VALUES.get(notification.strip().lower(), 0),
            )
            if ".@template." in path:
                partial, _, rel = path.partition("@template.")
                if partial not in tree.multi:
                    tree.declare_multi(partial)
                tree.multi[partial].template[rel] = node
            else:
                tree.put(path, node)
        # Register instances already present in the table data.
        for partial, spec in tree.multi.items():
            for leaf in tree.leaves:
                if leaf.startswith(partial):
                    rest = leaf[len(partial):]
                    head = rest.split(".", 1)[0]
                    if head.isdigit():
                        tree.instances.setdefault(partial, set()).add(int(head))
                        spec.next_instance = max(spec.next_instance, int(head) + 1)
        return tree


# ---------------------------------------------------------------------------
# Profiles


@dataclass
class ConnectionRequestConfig:
    enabled: bool = True
    port: int = 7547
    path: str = "/cr"
    username: str = ""
    password: str = ""


@dataclass
class DeviceProfile:
    device_id: DeviceId = field(default_factory=DeviceId)
    acs_url: str = ""
    acs_username: str = ""
    acs_password: str = ""
    allow_basic_over_plain_http: bool = False
    tls_mode: str = "strict"
    tls_expected_cn: str = ""
    tls_trust_roots: str = ""
    periodic_inform_interval: int = 86400
    cr: ConnectionRequestConfig = field(default_factory=ConnectionRequestConfig)
    inform_params: tuple[str, ...] = ()
    tree: ParameterTree = field(default_factory=ParameterTree)

    def inform_parameter_list(self) -> tuple[ParameterValue, ...]:
        out = []
        for path in self.inform_params:
            node = self.tree.leaves.get(path)
            if node is not None:
                out.append(ParameterValue(path, node.value, node.value_type))
        return tuple(out)


def save_profile(profile: DeviceProfile, path: str) -> None:
    lines = [
        "[device]",
        f"manufacturer: {profile.device_id.manufacturer}",
        f"oui: {profile.device_id.oui}",
        f"product_class: {profile.device_id.product_class}",
        f"serial_number: {profile.device_id.serial_number}",
        f"acs_url: {profile.acs_url}",
        f"acs_username: {profile.acs_username}",
        f"acs_password: {profile.acs_password}",
        f"allow_basic_over_plain_http: {'yes' if profile.allow_basic_over_plain_http else 'no'}",
        f"tls_mode: {profile.tls_mode}",
        f"tls_expected_cn: {profile.tls_expected_cn}",
        f"tls_trust_roots: {profile.tls_trust_roots}",
        f"periodic_inform_interval: {profile.periodic_inform_interval}",
        f"cr_enabled: {'yes' if profile.cr.enabled else 'no'}",
        f"cr_port: {profile.cr.port}",
        f"cr_path: {profile.cr.path}",
        f"cr_username: {profile.cr.username}",
        f"cr_password: {profile.cr.password}",
        f"inform_params: {', '.join(profile.inform_params)}",
        "",
        "[tree]",
    ]
    lines.extend(profile.tree.to_table_lines())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _profile_from_sections(sections: list[textconf.Section]) -> DeviceProfile:
    head = textconf.first_section(sections, "device")
    if head is None:
        raise textconf.ConfigError("profile has no [device] section")
    tree_sec = textconf.first_section(sections, "tree")
    tree = ParameterTree.from_table_lines(tree_sec.lines) if tree_sec else ParameterTree()
    inform_params = tuple(
        p.strip() for p in (head.get("inform_params") or "").split(",") if p.strip()
    )
    return DeviceProfile(
        device_id=DeviceId(
            manufacturer=head.get("manufacturer", "") or "",
            oui=head.get("oui", "") or "",
            product_class=head.get("product_class", "") or "",
            serial_number=head.get("serial_number", "") or "",
        ),
        acs_url=head.get("acs_url", "") or "",
        acs_username=head.get("acs_username", "") or "",
        acs_password=head.get("acs_password", "") or "",
        allow_basic_over_plain_http=head.get_bool("allow_basic_over_plain_http", False),
        tls_mode=head.get("tls_mode", "strict") or "strict",
        tls_expected_cn=head.get("tls_expected_cn", "") or "",
        tls_trust_roots=head.get("tls_trust_roots", "") or "",
        periodic_inform_interval=head.get_int("periodic_inform_interval", 86400),
        cr=ConnectionRequestConfig(
            enabled=head.get_bool("cr_enabled", True),
            port=head.get_int("cr_port", 7547),
            path=head.get("cr_path", "/cr") or "/cr",
            username=head.get("cr_username", "") or "",
            password=head.get("cr_password", "") or "",
        ),
        inform_params=inform_params,
        tree=tree,
    )


def load_profile(path: str) -> DeviceProfile:
    return _profile_from_sections(textconf.load_sections(path))


def load_profile_text(text: str) -> DeviceProfile:
    return _profile_from_sections(textconf.parse_sections(text))


def default_profile() -> DeviceProfile:
    """The profile shipped with the package: a DSL gateway fresh out of
    factory reset, matching the values used throughout the test suite."""
    data = importlib.resources.files("cwmpkit.data").joinpath("default_profile.txt").read_text("utf-8")
    return load_profile_text(data)


# ---------------------------------------------------------------------------
# Profile recovery from observed traffic


def profile_from_envelopes(
    pairs: list[tuple[str, RpcEnvelope]],
    *,
    acs_url: str = "",
) -> DeviceProfile:
    """Distill a device profile from decoded traffic.

    ``pairs`` holds ("to-acs" | "to-client", envelope) in wire order.
    Identity and the initial parameter set come from the first Inform;
    server writes mark parameters writable and later values win.  Secrets
    are never recoverable from a transcript, so credential fields are left
    as placeholders for the operator to fill in.
    """
    inform: Inform | None = None
    tree = ParameterTree()
    inform_params: tuple[str, ...] = ()
    for direction, env in pairs:
        if env.kind == "Inform" and direction == "to-acs":
            body: Inform = env.body
            if inform is None:
                inform = body
                inform_params = tuple(p.path for p in body.parameter_list)
            for p in body.parameter_list:
                node = tree.leaves.get(p.path) or ParameterNode(value_type=p.value_type)
                node.value = p.value
                tree.leaves[p.path] = node
        elif env.kind == "GetParameterValuesResponse" and direction == "to-acs":
            for p in env.body.parameter_list:
                node = tree.leaves.get(p.path) or ParameterNode(value_type=p.value_type)
                node.value = p.value
                tree.leaves[p.path] = node
        elif env.kind == "SetParameterValues" and direction == "to-client":
            for p in env.body.parameter_list:
                node = tree.leaves.get(p.path) or ParameterNode(value_type=p.value_type)
                node.value = p.value
                node.writable = True
                tree.leaves[p.path] = node
    if inform is None:
        raise ValueError("transcript contains no Inform; cannot identify the device")
    return DeviceProfile(
        device_id=inform.device_id,
        acs_url=acs_url,
        acs_username="CHANGEME",
        acs_password="CHANGEME",
        inform_params=inform_params,
        tree=tree,
    )


def profile_from_transcript(transcript: SessionTranscript) -> DeviceProfile:
    """Distill a profile from a client-side session transcript."""
    from . import codec

    pairs: list[tuple[str, RpcEnvelope]] = []
    for ex in transcript.exchanges:
        if ex.request.body:
            try:
                pairs.append(("to-acs", codec.decode(ex.request.body, mode="lenient")))
            except codec.DecodeError:
                pass
        if ex.response is not None and ex.response.body:
            try:
                pairs.append(("to-client", codec.decode(ex.response.body, mode="lenient")))
            except codec.DecodeError:
                pass
    return profile_from_envelopes(pairs, acs_url=transcript.acs_url)
