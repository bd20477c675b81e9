/** Spawns the real annotation service for integration tests. */

import { spawn, execFileSync, type ChildProcess } from 'node:child_process';
import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';

const FIXTURE_SCRIPT = `
import sys, numpy as np, torch
from pathlib import Path
from PIL import Image
from ifseg.config import ModelConfig
from ifseg.model import SegmentationModel, save_checkpoint

out = Path(sys.argv[1])
(out / "corpus").mkdir(parents=True, exist_ok=True)
torch.manual_seed(7)
cfg = ModelConfig(backbone_variant="resnet18", feature_channels=16,
                  num_query_scales=2, query_scale_fractions=(1.0, 0.5),
                  input_patch=64, click_disk_radius=2)
save_checkpoint(out / "model.pt", SegmentationModel(cfg))
rng = np.random.default_rng(0)
for rid in ("sup0", "qry0", "qry1"):
    img = (rng.random((24, 32, 3)) * 255).astype(np.uint8)
    Image.fromarray(img).save(out / "corpus" / f"{rid}.png")
print("fixture ready")
`;

export interface RunningService {
  baseUrl: string;
  stop(): void;
  workDir: string;
}

export async function startService(port = 8731): Promise<RunningService> {
  const workDir = fs.mkdtempSync(path.join(os.tmpdir(), 'ifseg-ui-'));
  execFileSync('python3', ['-c', FIXTURE_SCRIPT, workDir], { stdio: 'pipe' });
  const child: ChildProcess = spawn(
    'python3',
    [
      '-m', 'ifseg.cli', 'serve',
      '--checkpoint', path.join(workDir, 'model.pt'),
      '--corpus', path.join(workDir, 'corpus'),
      '--state', path.join(workDir, 'state'),
      '--port', String(port),
    ],
    { stdio: ['ignore', 'pipe', 'pipe'] },
  );
  const stderr: string[] = [];
  child.stderr?.on('data', (d) => stderr.push(String(d)));
  const baseUrl = `http://127.0.0.1:${port}`;

  const deadline = Date.now() + 60_000;
  for (;;) {
    if (child.exitCode !== null) {
      throw new Error(`service exited early:\n${stderr.join('')}`);
    }
    try {
      const resp = await fetch(`${baseUrl}/sessions/__probe__`);
      if (resp.status === 404) break; // up and routing
    } catch {
      /* not listening yet */
    }
    if (Date.now() > deadline) {
      child.kill('SIGKILL');
      throw new Error(`service did not come up:\n${stderr.join('')}`);
    }
    await new Promise((r) => setTimeout(r, 250));
  }
  return {
    baseUrl,
    workDir,
    stop() {
      child.kill('SIGTERM');
    },
  };
}
