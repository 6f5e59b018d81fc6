use crate::channel::{awgn, normalize_power, side_channel, Snr};
use crate::error::Result;
use crate::hv_codec::Mode;
use crate::jscc_codec::SymbolStream;
use crate::metrics::{category_psnr_from, cbr, patch_psnrs, sad_from_psnr, RunReport};
use crate::numkit::RngStream;
use crate::scene::{reassemble, Image, PatchGrid};

use super::data::Sample;
use super::train::TrainedSystem;

/// Everything produced by sending one image.
#[derive(Clone, Debug)]
pub struct Transmission {
    pub report: RunReport,
    pub reconstruction: Image,
    pub received: SymbolStream,
    pub side_bits: f64,
}

/// Noise stream for `(image, snr)`; every method sees the same one.
pub fn channel_rng(channel_seed: u64, image_id: &str, snr: Snr) -> RngStream {
    RngStream::new(channel_seed)
        .fork_named(image_id)
        .fork_named(&snr.to_string())
}

/// Sends `sample` through the full chain and scores the reconstruction.
///
/// With `count_side_channel`, the length vector is charged at two bits per
/// complex channel use.
pub fn transmit(
    sys: &TrainedSystem,
    sample: &Sample,
    snr: Snr,
    rng: &mut RngStream,
    count_side_channel: bool,
    fingerprint: &str,
) -> Result<Transmission> {
    let latent = sys.hv.vectorize(&sample.grid, Mode::Infer, rng)?;
    let k = sys.allocate(&latent.e, &sample.levels)?;
    let y = sys.jscc.encode(&latent.x, &k)?;
    let y = normalize_power(&y)?;
    let y_hat = awgn(&y, snr, rng);
    let side = side_channel(&k, sys.rate().v.len());
    let received = SymbolStream::new(side.k.clone(), y_hat.symbols().to_vec())?;
    let x_hat = sys.jscc.decode(&received)?;
    let grid: PatchGrid = sys.hv.inverse_vectorize(&x_hat)?;
    let reconstruction = reassemble(&grid)?;

    let (h, w) = (sample.image.height(), sample.image.width());
    let mut ratio = cbr(&k, h, w)?;
    if count_side_channel {
        ratio += side.overhead_bits / 2.0 / (3 * h * w) as f64;
    }
    let psnr = patch_psnrs(&sample.grid, &grid)?;
    let report = RunReport {
        image_id: sample.id.clone(),
        method: sys.method.name().to_string(),
        snr_db: snr.to_string(),
        cbr: ratio,
        sad_db: sad_from_psnr(&psnr, &sample.levels)?,
        psnr: category_psnr_from(&psnr, &sample.levels)?,
        k,
        rows: grid.rows,
        cols: grid.cols,
        patch_psnr: psnr,
        levels: sample.levels.levels().to_vec(),
        config_fingerprint: fingerprint.to_string(),
    };
    Ok(Transmission {
        report,
        reconstruction,
        received,
        side_bits: side.overhead_bits,
    })
}
