"""Exception types raised across the package."""


class MeshSplatError(Exception):
    """Base class for all package errors."""


class GeometryError(MeshSplatError):
    pass


class DegenerateFace(GeometryError):
    def __init__(self, face, area=None):
        self.face = face
        self.area = area
        super().__init__(f"face {face} is degenerate (area={area})")


class NonManifoldEdge(GeometryError):
    def __init__(self, edge):
        self.edge = edge
        super().__init__(f"edge {edge} has more than two incident faces")


class IndexOutOfRange(GeometryError, IndexError):
    pass


class InvalidFace(GeometryError, IndexError):
    pass


class BarycentricOutOfRange(GeometryError, ValueError):
    pass


class ZeroNormal(GeometryError):
    pass


class TopologyMismatch(MeshSplatError):
    pass


class BehindCamera(MeshSplatError):
    pass


class ShapeMismatch(MeshSplatError, ValueError):
    pass


class NumericalError(MeshSplatError):
    """Non-finite values appeared during optimization or rendering."""


class NonFiniteGradient(NumericalError):
    def __init__(self, index, group=None):
        self.index = index
        self.group = group
        where = f" in group {group!r}" if group else ""
        super().__init__(f"non-finite gradient for gaussian {index}{where}")


class NonFiniteParam(NumericalError):
    def __init__(self, group, index=None):
        self.group = group
        self.index = index
        super().__init__(f"non-finite parameter in group {group!r} (row {index})")


class DataError(MeshSplatError):
    """Problems with files on disk: missing, malformed or inconsistent."""


class MissingFile(DataError, FileNotFoundError):
    pass


class BadManifest(DataError, ValueError):
    pass


class ChecksumMismatch(DataError):
    pass


class ObjFormatError(DataError, ValueError):
    pass
