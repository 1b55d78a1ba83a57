class PcrefineError(Exception):
    pass


class DimensionError(PcrefineError, ValueError):
    pass


class InputError(PcrefineError, ValueError):
    pass


class StateError(PcrefineError, RuntimeError):
    pass


class UsageError(PcrefineError, RuntimeError):
    pass


class ConfigError(PcrefineError, ValueError):
    pass


class EmptyCloudError(InputError):
    """No voxel exceeded the threshold."""

    def __init__(self, theta, max_prob):
        self.theta = theta
        self.max_prob = max_prob
        super().__init__(
            f"no voxel exceeds theta={theta:g} (volume max probability {max_prob:g})"
        )


class InsufficientPointsError(InputError):
    def __init__(self, required, available):
        self.required = required
        self.available = available
        super().__init__(
            f"neighborhood needs {required} points but cloud has {available}"
        )


class UndefinedMetricError(PcrefineError, ValueError):
    pass
