/**
 * Differentiable weak-query loss for JS/TS training loops.
 *
 * The probability engine lives in the Python `queryprob` package; this
 * binding talks to it exclusively through its public CLI and the v1 scene
 * file format, so the numerics are identical to `queryprob eval` /
 * `queryprob grad` by construction.  Calls are stateless and each spawns its
 * own process, so concurrent use from multiple workers is safe.
 *
 * The host owns the model parameters: `nllAndGrad` returns dL/dp (the
 * gradient with respect to the per-object class probabilities) and the host
 * applies its own softmax/normalization Jacobian.
 */

import { spawnSync } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

export const VERSION = "0.1.0";
export const FORMAT_VERSION = 1;

/** Floor used by the engine when taking logs of tiny probabilities. */
export const LOG_FLOOR = 1e-12;

export interface VocabDescriptor {
  /** Ordered class names (size K); belief rows use this order. */
  classes: string[];
  /** Classes exempt from count constraints (e.g. a no-object class). */
  ignored?: string[];
  /** Integer weight per class for sum queries; defaults to the class index. */
  values?: number[];
}

export interface BoundScene {
  id?: string;
  /** Row-major n x K probability rows, one per object. */
  beliefs: number[][];
  /** Query text in the v1 grammar, e.g. "count_objects([A,B],[1,1])". */
  query: string;
}

export interface BoundBatch {
  vocab: VocabDescriptor;
  scenes: BoundScene[];
}

export interface BindingOptions {
  /** Command used to launch the engine CLI; defaults to $QUERYPROB_CLI or "queryprob". */
  cli?: string[];
}

export interface NllAndGrad {
  /** Sum of -log max(P, LOG_FLOOR) over scenes, in scene order. */
  loss: number;
  /** Per-scene n x K matrices of dL/dp; zero rows for clamped/zero-probability scenes. */
  gradients: number[][][];
  /** Per-scene query probabilities (after delta filtering, when enabled). */
  probabilities: number[];
  /** Scenes whose probability hit zero and were floored. */
  zeroProbability: boolean[];
}

/**
 * Engine-side failure; `code` carries the engine's error name
 * (e.g. "BeliefNotNormalized", "SyntaxError", "QueryTooComplex").
 */
export class QueryProbError extends Error {
  constructor(public readonly code: string, message: string, public readonly exitCode: number) {
    super(message);
    this.name = code;
  }
}

export function version(): string {
  return VERSION;
}

/** Build a vocabulary descriptor, enforcing the same invariants as the engine. */
export function makeVocab(
  classes: string[],
  opts?: { ignored?: string[]; values?: number[] },
): VocabDescriptor {
  if (classes.length === 0) throw new QueryProbError("UnknownClass", "empty vocabulary", 3);
  if (new Set(classes).size !== classes.length) {
    throw new QueryProbError("UnknownClass", "class names must be unique", 3);
  }
  for (const name of opts?.ignored ?? []) {
    if (!classes.includes(name)) {
      throw new QueryProbError("UnknownClass", `ignored class ${name} not in vocabulary`, 3);
    }
  }
  if (opts?.values && opts.values.length !== classes.length) {
    throw new QueryProbError("LengthMismatch", "values length must equal class count", 3);
  }
  return { classes, ...opts };
}

function cliCommand(options?: BindingOptions): string[] {
  if (options?.cli) return options.cli;
  const fromEnv = process.env.QUERYPROB_CLI;
  if (fromEnv) return fromEnv.split(" ").filter((part) => part.length > 0);
  return ["queryprob"];
}

function sceneFileText(batch: BoundBatch): string {
  const header = {
    format_version: FORMAT_VERSION,
    vocab: batch.vocab.classes,
    ignored: batch.vocab.ignored ?? [],
    ...(batch.vocab.values ? { values: batch.vocab.values } : {}),
  };
  const lines = [JSON.stringify(header)];
  batch.scenes.forEach((scene, index) => {
    lines.push(
      JSON.stringify({
        id: scene.id ?? `scene${index}`,
        beliefs: scene.beliefs,
        query: scene.query,
      }),
    );
  });
  return lines.join("\n") + "\n";
}

interface CliRecord {
  record: string;
  [key: string]: unknown;
}

function runCli(args: string[], batch: BoundBatch, options?: BindingOptions): CliRecord[] {
  const dir = mkdtempSync(join(tmpdir(), "queryprob-"));
  try {
    const scenePath = join(dir, "scenes.jsonl");
    writeFileSync(scenePath, sceneFileText(batch), { encoding: "ascii" });
    const [command, ...prefix] = cliCommand(options);
    if (!command) throw new QueryProbError("InputError", "empty CLI command", 2);
    const result = spawnSync(command, [...prefix, ...args, "--scenes", scenePath], {
      encoding: "utf-8",
      maxBuffer: 256 * 1024 * 1024,
    });
    if (result.error) {
      throw new QueryProbError("EngineUnavailable", `cannot launch ${command}: ${result.error.message}`, 2);
    }
    if (result.status !== 0) {
      const match = /error: (\w+): ([^\n]*)/.exec(result.stderr ?? "");
      const code = match?.[1] ?? "QueryProbError";
      const message = match?.[2] ?? (result.stderr || `engine exited with ${result.status}`);
      throw new QueryProbError(code, message, result.status ?? -1);
    }
    return result.stdout
      .split("\n")
      .filter((line) => line.trim().length > 0)
      .map((line) => JSON.parse(line) as CliRecord);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}

/**
 * Exact probability of each scene's query (identical to `queryprob eval`).
 * An empty batch returns an empty vector.
 */
export function boundEvaluate(batch: BoundBatch, options?: BindingOptions): number[] {
  if (batch.scenes.length === 0) return [];
  const records = runCli(["eval"], batch, options);
  return records
    .filter((record) => record.record === "scene")
    .map((record) => record.probability as number);
}

/**
 * Batch negative log-likelihood and per-scene dL/dp matrices.
 *
 * `delta` enables the engine's confidence filtering: objects whose top class
 * probability reaches delta are clamped to certainty, their rows report a
 * zero gradient, and the query budget shrinks accordingly.  Scenes with zero
 * probability contribute -log(LOG_FLOOR) and an all-zero matrix.
 */
export function boundNllAndGrad(
  batch: BoundBatch,
  delta = 1.0,
  options?: BindingOptions,
): NllAndGrad {
  if (batch.scenes.length === 0) {
    return { loss: 0, gradients: [], probabilities: [], zeroProbability: [] };
  }
  const records = runCli(
    ["grad", "--method", "reverse", "--delta", String(delta)],
    batch,
    options,
  ).filter((record) => record.record === "gradient");
  let loss = 0;
  const gradients: number[][][] = [];
  const probabilities: number[] = [];
  const zeroProbability: boolean[] = [];
  for (const record of records) {
    const probability = (record.probability as number | undefined) ?? 0;
    const entries = record.entries as number[][];
    probabilities.push(probability);
    if (probability <= 0) {
      loss += -Math.log(LOG_FLOOR);
      gradients.push(entries.map((row) => row.map(() => 0)));
      zeroProbability.push(true);
      continue;
    }
    const clamped = Math.max(probability, LOG_FLOOR);
    loss += -Math.log(clamped);
    gradients.push(
      entries.map((row) => row.map((value) => (value === 0 ? 0 : -value / clamped))),
    );
    zeroProbability.push(false);
  }
  return { loss, gradients, probabilities, zeroProbability };
}
