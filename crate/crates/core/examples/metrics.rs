//! IoU, pixel accuracy and superpixel precision on a toy prediction, and
//! the upsampling used to score low-resolution logits.

use cvaeseg::metrics::{
    grid_superpixels, iou, mean_iou, pixel_accuracy, superpixel_average_precision, upsample_prediction,
};
use cvaeseg::Tensor;

fn main() -> cvaeseg::Result<()> {
    let gt: Vec<u8> = (0..64).map(|i| ((i % 8) >= 3 && (i / 8) >= 2) as u8).collect();
    let pred: Vec<u8> = (0..64).map(|i| ((i % 8) >= 4 && (i / 8) >= 2) as u8).collect();
    println!("pixel accuracy {:.4}", pixel_accuracy(&pred, &gt)?);
    println!("foreground IoU {:.4}", iou(&pred, &gt, 1)?);
    println!("mean IoU       {:.4}", mean_iou(&pred, &gt, 2)?);
    for n in [2, 4, 8] {
        let sp = grid_superpixels(8, 8, n)?;
        println!("SAP {n}x{n} grid   {:.4}", superpixel_average_precision(&pred, &gt, &sp)?);
    }

    let logits = Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 0.0, -1.0, 0.0, 1.0, 1.0, 2.0])?;
    let labels = upsample_prediction(&logits, 8, 8)?;
    for row in labels.chunks(8) {
        println!("{}", row.iter().map(|&l| if l == 1 { '#' } else { '.' }).collect::<String>());
    }
    Ok(())
}
