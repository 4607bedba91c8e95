import csv
import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from config import ConfigError
from forward_bae import ErrorModel
from inversion import Design
from mesh_fem import Field, Mesh

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
EPS0_FILE = 'eps0.csv'
GAMMA_NU_FILE = 'gamma_nu.csv'


class ResultStore:
    """Reads and writes run artifacts as plain CSV/JSON under one output directory"""

    def __init__(self, root: str):
        self.root = Path(root)
        self.stats = {'files_written': 0, 'files_read': 0}

    def path(self, name: str) -> Path:
        return self.root / name

    def _prepare(self, name: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.stats['files_written'] += 1
        return path

    def _existing(self, name: str, what: str) -> Path:
        path = self.path(name)
        if not path.is_file():
            raise ConfigError(f"{what} not found: expected file {path}")
        self.stats['files_read'] += 1
        return path

    # total-error model

    def save_error_model(self, model: ErrorModel, prefix: str = '') -> List[Path]:
        header = f"n_mc={model.n_mc_used}, seed={model.seed}, sigma={model.sigma!r}"
        eps0_path = self._prepare(prefix + EPS0_FILE)
        np.savetxt(eps0_path, model.eps0[None, :], delimiter=',', fmt=FLOAT_FORMAT, header=header)
        gamma_path = self._prepare(prefix + GAMMA_NU_FILE)
        np.savetxt(gamma_path, model.Gamma_nu, delimiter=',', fmt=FLOAT_FORMAT, header=header)
        logger.info(f"Saved error model ({model.n_s} sensors) to {eps0_path.parent}")
        return [eps0_path, gamma_path]

    def load_error_model(self, prefix: str = '') -> ErrorModel:
        eps0_path = self._existing(prefix + EPS0_FILE, 'Error model mean')
        gamma_path = self._existing(prefix + GAMMA_NU_FILE, 'Error model covariance')
        meta = _read_header(eps0_path)
        eps0 = np.loadtxt(eps0_path, delimiter=',', ndmin=1)
        Gamma_nu = np.loadtxt(gamma_path, delimiter=',', ndmin=2)
        seed = meta.get('seed')
        return ErrorModel.from_total(
            eps0, Gamma_nu, float(meta['sigma']),
            n_mc_used=int(meta.get('n_mc', 0)),
            seed=None if seed in (None, 'None') else int(seed))

    # fields and mesh

    def save_field(self, name: str, field: Field, coordinates: np.ndarray) -> Path:
        """Columns x, y, z, value (bottom-face fields get z = 0)"""
        coords = np.zeros((coordinates.shape[0], 3))
        coords[:, :coordinates.shape[1]] = coordinates
        path = self._prepare(name)
        np.savetxt(path, np.column_stack([coords, field.values]), delimiter=',',
                   fmt=FLOAT_FORMAT, header='x,y,z,value', comments='')
        return path

    def load_field(self, name: str, support: str) -> Field:
        data = np.loadtxt(self._existing(name, 'Field file'), delimiter=',', skiprows=1, ndmin=2)
        return Field(support, data[:, 3])

    def save_mesh(self, mesh: Mesh, prefix: str = 'mesh') -> List[Path]:
        nodes_path = self._prepare(f'{prefix}_nodes.csv')
        coords = mesh.node_coordinates
        np.savetxt(nodes_path, np.column_stack([np.arange(mesh.n_nodes), coords]), delimiter=',',
                   fmt=['%d', FLOAT_FORMAT, FLOAT_FORMAT, FLOAT_FORMAT], header='id,x,y,z', comments='')
        elements_path = self._prepare(f'{prefix}_elements.csv')
        conn = mesh.volume.connectivity
        np.savetxt(elements_path, np.column_stack([np.arange(conn.shape[0]), conn]), delimiter=',',
                   fmt='%d', header='id,' + ','.join(f'n{i}' for i in range(conn.shape[1])), comments='')
        return [nodes_path, elements_path]

    # designs, data vectors, records

    def save_design(self, name: str, design: Design) -> Path:
        path = self._prepare(name)
        path.write_text(''.join(f'{j}\n' for j in design.active))
        return path

    def load_design(self, name: str, n_s: int) -> Design:
        text = self._existing(name, 'Design file').read_text()
        indices = [int(line) for line in text.split() if line.strip()]
        return Design.from_indices(indices, n_s)

    def save_vector(self, name: str, values: np.ndarray, header: str = '') -> Path:
        path = self._prepare(name)
        np.savetxt(path, np.asarray(values, dtype=float)[None, :], delimiter=',',
                   fmt=FLOAT_FORMAT, header=header)
        return path

    def load_vector(self, name: str, length: Optional[int] = None) -> np.ndarray:
        values = np.loadtxt(self._existing(name, 'Data file'), delimiter=',', ndmin=1)
        if length is not None and values.shape != (length,):
            raise ValueError(f"{name} holds {values.size} values, expected {length}")
        return values

    def save_json(self, name: str, record: Dict[str, Any]) -> Path:
        path = self._prepare(name)
        path.write_text(json.dumps(record, indent=2, default=_json_default))
        return path

    def load_json(self, name: str) -> Dict[str, Any]:
        return json.loads(self._existing(name, 'Record').read_text())

    def save_table(self, name: str, rows: List[Dict[str, Any]]) -> Path:
        path = self._prepare(name)
        fieldnames = list(rows[0].keys()) if rows else []
        with open(path, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})
        logger.debug(f"Wrote {len(rows)} rows to {path}")
        return path


def _read_header(path: Path) -> Dict[str, str]:
    first = path.read_text().splitlines()[0]
    return dict(re.findall(r'(\w+)=([^,\s]+)', first.lstrip('#')))


def _cell(value):
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    if isinstance(value, (list, tuple, np.ndarray)):
        return ' '.join(str(int(v)) for v in value)
    return value


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value)}")
