#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cdmamba/errors.hpp"

namespace cdmamba {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// When enabled, tensor construction and op outputs are scanned for NaN/Inf.
// Training loops switch it off and check the loss instead.
bool checked_mode();
void set_checked_mode(bool on);

// Dense row-major tensor. The value carrier for everything in this project.
// S is float or double; double is the default for all verification paths.
template <typename S>
class TensorT {
public:
    TensorT() = default;

    // members initialize in declaration order, so data_ can size itself off shape_
    explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), S(0)) {
        for (std::size_t e : shape_)
            if (e == 0) throw ShapeError("tensor extent 0 in shape " + shape_str(shape_));
    }

    TensorT(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        check_finite_if_enabled("construct");
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, S v) {
        TensorT t(std::move(shape));
        for (S& x : t.data_) x = v;
        t.check_finite_if_enabled("full");
        return t;
    }

    static TensorT scalar(S v) { return TensorT({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](std::size_t i) { return data_[i]; }
    S operator[](std::size_t i) const { return data_[i]; }

    // row-major element access for the common ranks
    S& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    S at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    S& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    S at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void check_finite(const std::string& context) const {
        if (!all_finite())
            throw NumericError("non-finite value in tensor (" + context + "), shape " +
                               shape_str(shape_));
    }

    void check_finite_if_enabled(const std::string& context) const {
        if (checked_mode()) check_finite(context);
    }

    template <typename T2>
    TensorT<T2> cast() const {
        std::vector<T2> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T2>(data_[i]);
        return TensorT<T2>(shape_, std::move(out));
    }

private:
    Shape shape_;
    std::vector<S> data_;
};

using Tensor = TensorT<double>;

template <typename S>
void require_shape(const TensorT<S>& t, const Shape& want, const char* what) {
    if (t.shape() != want)
        throw ShapeError(std::string(what) + ": expected shape " + shape_str(want) + ", got " +
                         shape_str(t.shape()));
}

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename S>
double max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace cdmamba
