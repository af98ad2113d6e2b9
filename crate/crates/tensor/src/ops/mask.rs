use crate::element::Float;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

impl<T: Float> Tensor<T> {
    fn check_mask(&self, op: &'static str, mask: &[bool]) -> Result<()> {
        if mask.len() != self.numel() {
            return Err(invalid(
                op,
                format!("mask of {} entries for tensor of shape {:?}", mask.len(), self.shape()),
            ));
        }
        Ok(())
    }

    /// Elements where `mask` is set, in row-major order, as a 1-D tensor.
    pub fn masked_select(&self, mask: &[bool]) -> Result<Tensor<T>> {
        self.check_mask("masked_select", mask)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        let len = data.len();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            "masked_select",
            data,
            vec![len],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut it = g.iter();
                let gx = mask
                    .iter()
                    .map(|&m| if m { *it.next().unwrap() } else { T::zero() })
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// Replaces elements where `mask` is set with `value`.
    pub fn masked_fill(&self, mask: &[bool], value: T) -> Result<Tensor<T>> {
        self.check_mask("masked_fill", mask)?;
        let data = self
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            "masked_fill",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                vec![Some(
                    g.iter()
                        .zip(&mask)
                        .map(|(&g, &m)| if m { T::zero() } else { g })
                        .collect(),
                )]
            }),
        ))
    }
}
