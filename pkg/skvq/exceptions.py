class SkvqError(Exception):
    kind = 'skvq'

    def __init__(self, message):
        super(SkvqError, self).__init__(message)
        self.message = message

    def one_line(self):
        return 'error: %s: %s' % (self.kind, ' '.join(str(self.message).split()))


class QuantizationError(SkvqError):
    kind = 'quantization'


class PlanError(SkvqError):
    kind = 'plan'


class CalibrationError(SkvqError):
    kind = 'calibration'


class CacheError(SkvqError):
    kind = 'cache'


class FormatError(SkvqError):
    kind = 'format'


class ModelError(SkvqError):
    kind = 'model'


class ConfigError(SkvqError):
    kind = 'config'
