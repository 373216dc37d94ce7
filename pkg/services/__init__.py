"""
Service layer: experiment orchestration.
Separates training and analysis runs from the command handlers.
"""
from .analysis_service import AnalysisService
from .rollout_service import RolloutService
from .student_service import StudentService
from .teacher_service import TeacherService

__all__ = ['AnalysisService', 'RolloutService', 'StudentService', 'TeacherService']
