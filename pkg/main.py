"""
Точка входа без установки пакета: python main.py <команда> ...
"""
import sys
from pathlib import Path

# Добавляем путь к модулю
sys.path.insert(0, str(Path(__file__).parent))

from ghnforge.cli import run


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
