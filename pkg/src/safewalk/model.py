"""Robot model parameters and the model-file loader.

Kinematic convention (fixed for the whole package, see README figure):

* The robot is a planar chain of five rigid links pinned at the stance
  foot, which sits at the world origin.  Ground is the line y = 0.
* Absolute link angles are measured counter-clockwise from the +y axis.
  A link at angle ``phi`` points along ``u(phi) = (-sin phi, cos phi)``.
* Generalized coordinates ``q = (q1..q5)``:

  - ``q1``  torso pitch (absolute),
  - ``q2``  stance hip (stance thigh relative to torso),
  - ``q3``  stance knee (shin relative to thigh),
  - ``q4``  swing hip (swing thigh relative to torso),
  - ``q5``  swing knee.

  Absolute angles: torso ``q1``, stance thigh ``q1+q2``, stance shin
  ``q1+q2+q3``, swing thigh ``q1+q4``, swing shin ``q1+q4+q5``.
* Joints q2..q5 carry motors; the stance contact point is unactuated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODEL_SCHEMA_VERSION = 1

N_Q = 5
N_U = 4

#: Maps joint angles to absolute link angles, link order
#: (torso, stance thigh, stance shin, swing thigh, swing shin).
LINK_ANGLE_MAP = np.array(
    [
        [1, 0, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 0, 0, 1, 0],
        [1, 0, 0, 1, 1],
    ],
    dtype=float,
)

#: Permutation applied to q at impact: legs swap roles, torso unchanged.
RELABEL = np.array([0, 3, 4, 1, 2])

LINK_NAMES = ("torso", "thigh", "shin")


class ModelFileError(ValueError):
    """Raised for malformed model files; message carries the line number."""


@dataclass(frozen=True)
class RobotModel:
    """Inertial and limit parameters of the planar five-link biped.

    Per-link parameters are given for the torso, thigh and shin; both
    legs share the thigh/shin values.  Center-of-mass offsets are
    measured from the proximal joint (hip for thighs and torso, knee
    for shins).
    """

    masses: dict        # link name -> kg
    lengths: dict       # link name -> m
    com_offsets: dict   # link name -> m from proximal joint
    inertias: dict      # link name -> kg m^2 about the link COM
    gravity: float = 9.81
    joint_limits: tuple = (
        (-np.pi / 2, np.pi / 2),
        (-np.pi / 2, np.pi / 2),
        (-np.pi / 2, 0.0),
        (-np.pi / 2, np.pi / 2),
        (-np.pi / 2, 0.0),
    )
    u_max: float = 30.0
    clearance_margin: float = 0.0
    n_q: int = N_Q
    n_u: int = N_U

    # derived arrays, filled in __post_init__
    link_masses: np.ndarray = field(default=None, repr=False, compare=False)
    link_inertias: np.ndarray = field(default=None, repr=False, compare=False)
    com_map: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in LINK_NAMES:
            for table, label in (
                (self.masses, "mass"),
                (self.lengths, "length"),
                (self.inertias, "inertia"),
            ):
                if table.get(name, 0.0) <= 0.0:
                    raise ValueError(f"{label} of link '{name}' must be positive")
            c = self.com_offsets.get(name)
            if c is None or not 0.0 < c < self.lengths[name]:
                raise ValueError(f"com offset of link '{name}' must lie inside the link")
        if self.u_max <= 0.0:
            raise ValueError("u_max must be positive")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError("joint-limit intervals must be nonempty")

        m_t, m_th, m_sh = (self.masses[n] for n in LINK_NAMES)
        i_t, i_th, i_sh = (self.inertias[n] for n in LINK_NAMES)
        c_t, c_th, c_sh = (self.com_offsets[n] for n in LINK_NAMES)
        l_t, l_th, l_sh = (self.lengths[n] for n in LINK_NAMES)

        object.__setattr__(self, "link_masses", np.array([m_t, m_th, m_sh, m_th, m_sh]))
        object.__setattr__(self, "link_inertias", np.array([i_t, i_th, i_sh, i_th, i_sh]))
        # COM position of link i = sum_k com_map[i, k] * u(phi_k); rows in
        # link order, columns in absolute-angle order (see LINK_ANGLE_MAP).
        com_map = np.array(
            [
                [c_t, l_th, l_sh, 0.0, 0.0],            # torso COM
                [0.0, l_th - c_th, l_sh, 0.0, 0.0],     # stance thigh COM
                [0.0, 0.0, l_sh - c_sh, 0.0, 0.0],      # stance shin COM
                [0.0, l_th, l_sh, -c_th, 0.0],          # swing thigh COM
                [0.0, l_th, l_sh, -l_th, -c_sh],        # swing shin COM
            ]
        )
        object.__setattr__(self, "com_map", com_map)

    @property
    def total_mass(self) -> float:
        return float(self.link_masses.sum())

    def within_joint_limits(self, q, tol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=float)
        for qi, (lo, hi) in zip(q, self.joint_limits):
            if qi < lo - tol or qi > hi + tol:
                return False
        return True


def nominal_model() -> RobotModel:
    """A representative planar five-link biped.

    The values are in the range of published five-link test platforms
    but are not the parameters of any specific robot.
    """
    return RobotModel(
        masses={"torso": 12.0, "thigh": 6.8, "shin": 3.2},
        lengths={"torso": 0.625, "thigh": 0.4, "shin": 0.4},
        com_offsets={"torso": 0.2, "thigh": 0.163, "shin": 0.128},
        inertias={"torso": 1.33, "thigh": 0.47, "shin": 0.2},
    )


def _parse_scalar(value: str, lineno: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ModelFileError(f"line {lineno}: expected a number, got {value!r}") from None


def load_model(path) -> RobotModel:
    """Parse and validate a model file.

    The format is block-structured text: ``key = value`` lines grouped
    under ``[link <name>]``, ``[joint_limits]`` and ``[limits]``
    headers, with a mandatory top-level ``schema_version``.
    """
    masses, lengths, coms, inertias = {}, {}, {}, {}
    gravity = None
    u_max = None
    schema_version = None
    clearance = 0.0
    joint_limits = {}
    section = None

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise ModelFileError(f"line {lineno}: unterminated section header")
                section = line[1:-1].strip()
                if section.startswith("link "):
                    name = section.split(None, 1)[1]
                    if name not in LINK_NAMES:
                        raise ModelFileError(
                            f"line {lineno}: unknown link {name!r}; expected one of {LINK_NAMES}"
                        )
                elif section not in ("joint_limits", "limits"):
                    raise ModelFileError(f"line {lineno}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ModelFileError(f"line {lineno}: expected 'key = value'")
            key, _, value = (part.strip() for part in line.partition("="))

            if section is None:
                if key == "schema_version":
                    schema_version = int(_parse_scalar(value, lineno))
                elif key == "gravity":
                    gravity = _parse_scalar(value, lineno)
                else:
                    raise ModelFileError(f"line {lineno}: unknown top-level key {key!r}")
            elif section.startswith("link "):
                name = section.split(None, 1)[1]
                table = {"mass": masses, "length": lengths, "com": coms, "inertia": inertias}.get(key)
                if table is None:
                    raise ModelFileError(f"line {lineno}: unknown link key {key!r}")
                table[name] = _parse_scalar(value, lineno)
            elif section == "joint_limits":
                if key not in ("q1", "q2", "q3", "q4", "q5"):
                    raise ModelFileError(f"line {lineno}: unknown joint {key!r}")
                parts = value.split()
                if len(parts) != 2:
                    raise ModelFileError(f"line {lineno}: joint limits need two numbers")
                joint_limits[key] = tuple(_parse_scalar(p, lineno) for p in parts)
            elif section == "limits":
                if key == "u_max":
                    u_max = _parse_scalar(value, lineno)
                elif key == "clearance_margin":
                    clearance = _parse_scalar(value, lineno)
                else:
                    raise ModelFileError(f"line {lineno}: unknown limits key {key!r}")

    if schema_version is None:
        raise ModelFileError("missing schema_version")
    if schema_version != MODEL_SCHEMA_VERSION:
        raise ModelFileError(
            f"unsupported schema_version {schema_version}; this build reads {MODEL_SCHEMA_VERSION}"
        )
    missing = [
        f"{what} of {name}"
        for table, what in ((masses, "mass"), (lengths, "length"), (coms, "com"), (inertias, "inertia"))
        for name in LINK_NAMES
        if name not in table
    ]
    if missing:
        raise ModelFileError("incomplete model file: missing " + ", ".join(missing))
    if u_max is None:
        raise ModelFileError("missing [limits] u_max")

    defaults = RobotModel.__dataclass_fields__["joint_limits"].default
    limits = tuple(
        joint_limits.get(f"q{i + 1}", defaults[i]) for i in range(N_Q)
    )
    return RobotModel(
        masses=masses,
        lengths=lengths,
        com_offsets=coms,
        inertias=inertias,
        gravity=gravity if gravity is not None else 9.81,
        joint_limits=limits,
        u_max=u_max,
        clearance_margin=clearance,
    )


def write_model(model: RobotModel, path) -> None:
    lines = [f"schema_version = {MODEL_SCHEMA_VERSION}", f"gravity = {model.gravity!r}", ""]
    for name in LINK_NAMES:
        lines += [
            f"[link {name}]",
            f"mass = {model.masses[name]!r}",
            f"length = {model.lengths[name]!r}",
            f"com = {model.com_offsets[name]!r}",
            f"inertia = {model.inertias[name]!r}",
            "",
        ]
    lines.append("[joint_limits]")
    for i, (lo, hi) in enumerate(model.joint_limits):
        lines.append(f"q{i + 1} = {lo!r} {hi!r}")
    lines += ["", "[limits]", f"u_max = {model.u_max!r}"]
    if model.clearance_margin:
        lines.append(f"clearance_margin = {model.clearance_margin!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
