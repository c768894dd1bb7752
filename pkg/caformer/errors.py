from gym import error


class CaformerError(error.Error):
    pass


class ContractError(CaformerError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    def __init__(self, kernel, *shapes):
        self.kernel = kernel
        self.shapes = shapes
        super().__init__("%s: incompatible shapes %s" % (kernel, " and ".join(str(tuple(s)) for s in shapes)))


class NumericError(CaformerError, ArithmeticError):
    pass


class ReproducibilityError(CaformerError):
    pass


class DataParseError(CaformerError, ValueError):
    def __init__(self, path, row, column, detail):
        self.path = path
        self.row = row
        self.column = column
        super().__init__("%s: row %d, column %s: %s" % (path, row, column, detail))


class SizeError(CaformerError):
    pass


class UndefinedConditionalError(CaformerError, ZeroDivisionError):
    def __init__(self, stratum):
        self.stratum = stratum
        super().__init__("conditional undefined: P(%s) == 0" % ", ".join("%s=%s" % kv for kv in stratum.items()))


class ConfigError(CaformerError, ValueError):
    pass


class ArtifactError(CaformerError):
    pass


class DegenerateSeriesError(NumericError):
    """A scaled metric has a zero denominator (e.g. a constant seasonal in-sample series)."""
