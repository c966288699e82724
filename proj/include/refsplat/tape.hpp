#pragma once

#include <Eigen/Dense>

#include <vector>

namespace refsplat {

/// Reverse-mode tape over dense matrices. Backward passes are themselves
/// recorded as tape operations, so gradients can be differentiated again.
/// Scalars are 1×1 matrices.
class Tape {
public:
    using Id = int;
    using Matrix = Eigen::MatrixXd;

    /// Differentiable input.
    Id variable(Matrix value);
    Id constant(Matrix value);

    /// a·b
    Id matmul(Id a, Id b);
    /// aᵀ·b
    Id matmul_tn(Id a, Id b);
    /// a·bᵀ
    Id matmul_nt(Id a, Id b);
    Id add(Id a, Id b);
    /// c·a for a fixed coefficient.
    Id scale(Id a, double c);
    /// a times the 1×1 node s.
    Id scalar_mul(Id a, Id s);
    /// Adds the column vector b to every column of a.
    Id add_columns(Id a, Id b);
    /// Column vector of row sums.
    Id row_sum(Id a);
    /// Repeats the column vector b across `cols` columns.
    Id broadcast_columns(Id b, int cols);
    static constexpr double kLeakySlope = 0.2;
    Id leaky_relu(Id a);
    /// a ⊙ leaky_relu′(ref); ref is treated as piecewise constant.
    Id slope_mul(Id a, Id ref);
    /// Σ a ⊙ b as a 1×1 node.
    Id dot(Id a, Id b);
    /// ‖a‖²
    Id squared_norm(Id a) { return dot(a, a); }
    /// Mean of all entries.
    Id mean(Id a);

    [[nodiscard]] const Matrix& value(Id id) const { return nodes_.at(id).value; }
    [[nodiscard]] bool requires_grad(Id id) const { return nodes_.at(id).requires_grad; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    /// Records the backward pass of the 1×1 node `output` and returns gradient
    /// nodes for `wrt` (zero constants where `output` does not depend on them).
    std::vector<Id> grad(Id output, const std::vector<Id>& wrt);

    /// Replaces the value of a variable or constant; call replay() afterwards.
    void set_value(Id id, Matrix value);
    /// Recomputes every operation node from the current leaf values.
    void replay();

private:
    enum class Op {
        Leaf,
        MatMul,
        MatMulTN,
        MatMulNT,
        Add,
        Scale,
        ScalarMul,
        AddColumns,
        RowSum,
        BroadcastColumns,
        LeakyRelu,
        SlopeMul,
        Dot,
    };
    struct Node {
        Op op = Op::Leaf;
        Id a = -1;
        Id b = -1;
        double c = 0.0;
        Matrix value;
        bool requires_grad = false;
    };

    Id push(Op op, Id a, Id b, double c);
    [[nodiscard]] Matrix evaluate(const Node& n) const;
    void accumulate(std::vector<Id>& adjoint, Id target, Id contribution);

    std::vector<Node> nodes_;
};

}  // namespace refsplat
