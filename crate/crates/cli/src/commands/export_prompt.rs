//! Render a saved prompt checkpoint as a portable pixmap for inspection.

use super::CmdResult;
use std::path::{Path, PathBuf};
use vpt_core::prompt::{export_prompt_ppm, load_prompt};

pub fn cmd_export_prompt(prompt_dir: &Path, out: Option<&Path>) -> CmdResult<()> {
    let prompt = load_prompt(prompt_dir)?;
    let path: PathBuf = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| prompt_dir.join("prompt.ppm"));
    export_prompt_ppm(&prompt, &path)?;
    let (c, h, w) = prompt.spec.dims;
    println!(
        "wrote {} ({} {}x{}x{}, p={}, {} parameters)",
        path.display(),
        prompt.spec.template.as_str(),
        c,
        h,
        w,
        prompt.spec.p,
        prompt.spec.param_count()
    );
    Ok(())
}
