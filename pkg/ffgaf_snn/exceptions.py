__all__ = ['FFGAFError', 'ConfigError', 'ShapeError', 'DataError', 'BadMagicError', 'TruncatedFileError',
           'CountMismatchError', 'EmptyClassError', 'CheckpointError', 'NumericError', 'CycleError',
           'DegenerateInputWarning']


class FFGAFError(Exception):
    """
    Base class for all errors raised by ffgaf_snn
    """


class ConfigError(FFGAFError, ValueError):
    """
    Exception raised if a parameter or configuration value is invalid
    """


class ShapeError(ConfigError):
    """
    Exception raised if tensor shapes are incompatible, the message names the offending dimension
    """


class DataError(FFGAFError, ValueError):
    """
    Exception raised if a dataset, a label or an input file is malformed
    """


class BadMagicError(DataError):
    """
    Exception raised if a binary file does not start with the expected magic number
    """


class TruncatedFileError(DataError):
    """
    Exception raised if a binary file ends before its header says it should
    """


class CountMismatchError(DataError):
    """
    Exception raised if paired files (images and labels) disagree on the number of samples
    """


class EmptyClassError(DataError):
    """
    Exception raised if a class has no samples
    """

    def __init__(self, class_id: int):
        super().__init__(f'class {class_id} has no samples')
        self.class_id = class_id


class CheckpointError(DataError):
    """
    Exception raised if a checkpoint container is malformed
    """


class NumericError(FFGAFError, ArithmeticError):
    """
    Exception raised if a NaN or an infinity is detected
    """


class CycleError(ValueError):
    """
    Exception raised if a dependency cycle is detected between pipeline stages
    """


class DegenerateInputWarning(UserWarning):
    """
    Warning issued when an input has no spread to standardize (all elements equal)
    """
