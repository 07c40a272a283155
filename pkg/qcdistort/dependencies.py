from qcdistort.config import Settings, get_settings


def get_modulus_solver(settings: Settings | None = None):
    from qcdistort.services.modulus import ModulusSolver
    return ModulusSolver(settings or get_settings())


def get_tube_service(settings: Settings | None = None):
    from qcdistort.services.tube import TubeService
    return TubeService(settings or get_settings())


def get_wiggle_service(settings: Settings | None = None):
    from qcdistort.services.wiggle import WiggleService
    return WiggleService(settings or get_settings())


def get_dimension_service(settings: Settings | None = None):
    from qcdistort.services.dimension import DimensionService
    return DimensionService(settings or get_settings())


def get_renderer(settings: Settings | None = None):
    from qcdistort.services.rendering import SvgRenderer
    return SvgRenderer(settings or get_settings())


def get_artifact_writer(out_dir, command: str, seed: int, config: dict, settings: Settings | None = None):
    from qcdistort.services.artifacts import ArtifactWriter
    return ArtifactWriter(settings or get_settings(), out_dir, command, seed, config)
