#include "pfdetr/tensor.hpp"

#include <algorithm>

namespace pfdetr {

Tensor::Tensor(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw std::invalid_argument("Tensor: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
}

double Tensor::item() const {
    if (data_.size() != 1) throw std::invalid_argument("Tensor::item on shape " + shape_str());
    return data_[0];
}

Tensor Tensor::transposed() const {
    Tensor t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

}  // namespace pfdetr
