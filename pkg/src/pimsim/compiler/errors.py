class CompileError(ValueError):
    """Base class for compilation failures."""


class CapacityError(CompileError):
    """The network needs more crossbars or cores than the chip provides."""


class MemoryOverflowError(CompileError):
    def __init__(self, core: int, required: int, available: int):
        self.core = core
        self.required = required
        self.available = available
        super().__init__(
            f"local memory overflow on core {core}: need {required} bytes, have {available}"
        )
