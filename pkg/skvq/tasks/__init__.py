from skvq.tasks.calibration import *
from skvq.tasks.evaluation import *
