//! Volume containers, RLE masks and checkpoints: encode, decode, reject.

use boxseg::imgproc::{Modality, Volume};
use boxseg::iohub::{
    decode_checkpoint, decode_volume, encode_checkpoint, encode_volume, rle_decode, rle_encode, VolumeContainer,
};
use boxseg::mask::BinaryMask;
use boxseg::model::{init_params, BoundingBox, ModelConfig};

fn main() -> boxseg::Result<()> {
    let v = Volume::new(2, 3, 4, (0..24).map(|i| i as f32 * 0.5).collect(), Modality::Mr)?.with_spacing([2.0, 0.7, 0.7]);
    let bytes = encode_volume(&VolumeContainer::from_volume(&v));
    println!("volume: {} bytes, roundtrip equal: {}", bytes.len(), decode_volume(&bytes)?.to_volume()? == v);
    println!("truncated: {}", decode_volume(&bytes[..bytes.len() - 1]).unwrap_err());

    let m = BinaryMask::from_box(6, 8, &BoundingBox::new(2, 1, 5, 4));
    let rle = rle_encode(&m);
    println!("rle counts {:?}, roundtrip equal: {}", rle.counts, rle_decode(&rle)? == m);

    let cfg = ModelConfig::micro();
    let params = init_params(&cfg)?;
    let mut ck = encode_checkpoint(&params, &cfg);
    println!("checkpoint: {} bytes, hash {}", ck.len(), params.content_hash());
    let last = ck.len() - 1;
    ck[last] ^= 1;
    println!("corrupted: {}", decode_checkpoint(&ck).unwrap_err());
    Ok(())
}
