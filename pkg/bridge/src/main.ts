/**
 * CLI entry point.
 *
 *   bridge serve --model stub|siglip [--seg stub|none]
 *   bridge precompute --root DIR [--stride N] [--manifest FILE --crops-base DIR] --model stub
 */

import { precompute } from './precompute.js';
import { serve } from './server.js';

function parseFlags(args: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < args.length; i++) {
    if (!args[i].startsWith('--')) throw new Error(`unexpected argument: ${args[i]}`);
    const key = args[i].slice(2);
    const value = args[i + 1];
    if (value === undefined || value.startsWith('--')) throw new Error(`flag --${key} needs a value`);
    out.set(key, value);
    i += 1;
  }
  return out;
}

async function main(): Promise<void> {
  const [command, ...rest] = process.argv.slice(2);
  if (command === 'serve') {
    const flags = parseFlags(rest);
    await serve({
      model: flags.get('model') ?? 'stub',
      seg: flags.get('seg') ?? 'stub',
      minConfidence: parseFloat(flags.get('min-confidence') ?? '0.5'),
    });
    return;
  }
  if (command === 'precompute') {
    const flags = parseFlags(rest);
    const model = flags.get('model') ?? 'stub';
    if (model !== 'stub') throw new Error(`precompute supports --model stub only (got ${model})`);
    const root = flags.get('root');
    if (!root) throw new Error('precompute needs --root');
    precompute({
      root,
      stride: parseInt(flags.get('stride') ?? '1', 10),
      manifest: flags.get('manifest'),
      cropsBase: flags.get('crops-base'),
    });
    return;
  }
  process.stderr.write('usage: bridge serve|precompute [flags]\n');
  process.exit(2);
}

main().catch((err) => {
  process.stderr.write(`${err instanceof Error ? err.message : err}\n`);
  process.exit(1);
});
