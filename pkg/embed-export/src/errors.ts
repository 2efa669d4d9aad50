/** Error taxonomy, mirroring the consumer pipeline's split between
 * bad configuration and bad bytes. */

export class ExportError extends Error {}

/** Invalid configuration: unknown backbone, missing input dir, bad flag. */
export class ConfigError extends ExportError {}

/** Malformed file contents; `offset` is the byte position of the first fault. */
export class FormatError extends ExportError {
  readonly offset: number;

  constructor(message: string, offset: number) {
    super(`${message} (offset ${offset})`);
    this.offset = offset;
  }
}
