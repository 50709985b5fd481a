import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `import toytree` work

from toytree import make_image_tree  # noqa: E402


@pytest.fixture
def toy_tree(tmp_path):
    tree = tmp_path / "imgs"
    make_image_tree(tree, ["cat", "dog"], per_class=3)
    return tree
